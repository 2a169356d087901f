//! Post-training int8 quantization.
//!
//! Weights use per-tensor symmetric quantization (`zero_point = 0`,
//! `scale = max|w| / 127`). In full mode, activations at every layer boundary
//! additionally pass through an asymmetric per-tensor quantize-dequantize step
//! whose parameters come from min/max calibration. Biases stay in binary32,
//! standing in for the int32 accumulator biases of integer kernels.
//!
//! All rounding is round-half-to-even.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{f32_b64, i8_b64};
use crate::error::{Error, Result};
use crate::nn::{self, ExecLayer, LayerKind, ModelSpec, Network, Op};
use crate::patch::{Dims, PatchSet};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub const UNIT: QuantParams = QuantParams {
        scale: 1.0,
        zero_point: 0,
    };

    pub fn new(scale: f64, zero_point: i32) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Argument(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::Argument(format!(
                "zero point {zero_point} outside int8"
            )));
        }
        Ok(Self { scale, zero_point })
    }

    /// Symmetric weight parameters for a tensor.
    pub fn symmetric(values: &[f32]) -> Self {
        let max_abs = values.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        if max_abs == 0.0 {
            return Self::UNIT;
        }
        Self {
            scale: max_abs / 127.0,
            zero_point: 0,
        }
    }

    /// Asymmetric parameters covering `[min, max]`. The range is first widened
    /// to contain zero so that zero stays exactly representable.
    pub fn affine(min: f64, max: f64) -> Self {
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        if hi == lo {
            return Self::UNIT;
        }
        let scale = (hi - lo) / 255.0;
        let zp = (QMIN as f64 - lo / scale).round_ties_even() as i32;
        Self {
            scale,
            zero_point: zp.clamp(QMIN, QMAX),
        }
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i8 {
        let q = (x / self.scale).round_ties_even() + self.zero_point as f64;
        q.clamp(QMIN as f64, QMAX as f64) as i8
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }

    #[inline]
    pub fn fake_quant(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    pub(crate) fn fake_quant_slice(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.fake_quant(*x);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    WeightsOnly,
    Full,
}

impl std::str::FromStr for QuantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights-only" => Ok(QuantMode::WeightsOnly),
            "full" => Ok(QuantMode::Full),
            other => Err(Error::Argument(format!(
                "unknown quantization mode '{other}' (weights-only | full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    #[serde(with = "i8_b64")]
    pub data: Vec<i8>,
    pub scale: f64,
    pub zero_point: i32,
}

impl QTensor {
    pub fn quantize(values: &[f32]) -> Self {
        let p = QuantParams::symmetric(values);
        Self {
            data: values.iter().map(|&v| p.quantize(v as f64)).collect(),
            scale: p.scale,
            zero_point: p.zero_point,
        }
    }

    pub fn params(&self) -> QuantParams {
        QuantParams {
            scale: self.scale,
            zero_point: self.zero_point,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let p = self.params();
        self.data.iter().map(|&q| p.dequantize(q)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QLayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
        weights: QTensor,
        #[serde(with = "f32_b64")]
        bias: Vec<f32>,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        weights: QTensor,
        #[serde(with = "f32_b64")]
        bias: Vec<f32>,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: QLayerKind,
    /// Output activation parameters (full mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub version: u32,
    pub mode: QuantMode,
    pub source_model_hash: String,
    pub input_dims: Dims,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_activation: Option<QuantParams>,
    pub layers: Vec<QLayerSpec>,
}

/// Activation parameters for the network input and each layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub input: QuantParams,
    pub layers: Vec<QuantParams>,
}

pub fn calibrate(model: &ModelSpec, calibration_set: &PatchSet) -> Result<Calibration> {
    if calibration_set.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    let net = model.compile()?;
    let n = model.layers.len();
    let mut in_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for patch in &calibration_set.patches {
        let (x0, outs) = net.layer_outputs(patch)?;
        widen_range(&mut in_range, &x0);
        for (r, o) in ranges.iter_mut().zip(&outs) {
            widen_range(r, o);
        }
    }
    Ok(Calibration {
        input: QuantParams::affine(in_range.0, in_range.1),
        layers: ranges
            .into_iter()
            .map(|(lo, hi)| QuantParams::affine(lo, hi))
            .collect(),
    })
}

fn widen_range(range: &mut (f64, f64), values: &[f64]) {
    for &v in values {
        range.0 = range.0.min(v);
        range.1 = range.1.max(v);
    }
}

/// Quantizes every weight tensor; full mode also attaches the activation
/// parameters from `calibration`.
pub fn quantize_weights(
    model: &ModelSpec,
    mode: QuantMode,
    calibration: Option<&Calibration>,
) -> Result<QuantizedModel> {
    model.validate()?;
    let calibration = match (mode, calibration) {
        (QuantMode::Full, None) => {
            return Err(Error::Argument(
                "full quantization needs a calibration".into(),
            ))
        }
        (QuantMode::Full, Some(c)) => {
            if c.layers.len() != model.layers.len() {
                return Err(Error::Shape(format!(
                    "calibration covers {} layers, model has {}",
                    c.layers.len(),
                    model.layers.len()
                )));
            }
            Some(c)
        }
        (QuantMode::WeightsOnly, _) => None,
    };
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let kind = match &l.kind {
                LayerKind::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => QLayerKind::Dense {
                    inputs: *inputs,
                    outputs: *outputs,
                    weights: QTensor::quantize(weights),
                    bias: bias.clone(),
                },
                LayerKind::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weights,
                    bias,
                } => QLayerKind::Conv3d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    weights: QTensor::quantize(weights),
                    bias: bias.clone(),
                },
                LayerKind::Relu => QLayerKind::Relu,
                LayerKind::Flatten => QLayerKind::Flatten,
            };
            QLayerSpec {
                name: l.name.clone(),
                kind,
                activation: calibration.map(|c| c.layers[i]),
            }
        })
        .collect();
    Ok(QuantizedModel {
        version: nn::MODEL_VERSION,
        mode,
        source_model_hash: model.digest(),
        input_dims: model.input_dims,
        class_count: model.class_count,
        input_activation: calibration.map(|c| c.input),
        layers,
    })
}

/// Convenience wrapper: calibrates when needed, then quantizes.
pub fn quantize_model(
    model: &ModelSpec,
    mode: QuantMode,
    calibration_set: Option<&PatchSet>,
) -> Result<QuantizedModel> {
    match mode {
        QuantMode::WeightsOnly => quantize_weights(model, mode, None),
        QuantMode::Full => {
            let set = calibration_set.ok_or_else(|| {
                Error::Argument("full quantization needs a calibration set".into())
            })?;
            let cal = calibrate(model, set)?;
            quantize_weights(model, mode, Some(&cal))
        }
    }
}

impl QuantizedModel {
    /// The float model this one was derived from, with dequantized weights.
    pub fn dequantized_spec(&self) -> ModelSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| nn::LayerSpec {
                name: l.name.clone(),
                kind: match &l.kind {
                    QLayerKind::Dense {
                        inputs,
                        outputs,
                        weights,
                        bias,
                    } => LayerKind::Dense {
                        inputs: *inputs,
                        outputs: *outputs,
                        weights: weights.dequantize().iter().map(|&v| v as f32).collect(),
                        bias: bias.clone(),
                    },
                    QLayerKind::Conv3d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        weights,
                        bias,
                    } => LayerKind::Conv3d {
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        weights: weights.dequantize().iter().map(|&v| v as f32).collect(),
                        bias: bias.clone(),
                    },
                    QLayerKind::Relu => LayerKind::Relu,
                    QLayerKind::Flatten => LayerKind::Flatten,
                },
            })
            .collect();
        ModelSpec {
            version: self.version,
            input_dims: self.input_dims,
            class_count: self.class_count,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let t = match &l.kind {
                QLayerKind::Dense { weights, .. } | QLayerKind::Conv3d { weights, .. } => {
                    Some(weights)
                }
                _ => None,
            };
            if let Some(t) = t {
                QuantParams::new(t.scale, t.zero_point).map_err(|e| Error::Format {
                    offset: 0,
                    message: format!("layer '{}': {e}", l.name),
                })?;
            }
            if let Some(a) = l.activation {
                QuantParams::new(a.scale, a.zero_point)?;
            }
        }
        if self.mode == QuantMode::Full
            && (self.input_activation.is_none()
                || self.layers.iter().any(|l| l.activation.is_none()))
        {
            return Err(Error::Format {
                offset: 0,
                message: "full-mode model lacks activation parameters".into(),
            });
        }
        // Shapes and payload sizes are checked through the float mirror.
        self.dequantized_spec().validate()
    }

    /// Builds the executable network; dequantized weights run in double
    /// precision, with activation fake-quantization in full mode.
    pub fn compile(&self) -> Result<Network> {
        self.validate()?;
        let mut net = self.dequantized_spec().compile()?;
        // Use the exact dequantized values rather than their binary32 copies.
        for (exec, q) in net.layers.iter_mut().zip(&self.layers) {
            set_exact_weights(exec, &q.kind);
            exec.output_quant = q.activation;
        }
        net.input_quant = self.input_activation;
        Ok(net)
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        nn::hex_digest(&bytes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let q: QuantizedModel = serde_json::from_str(&text)?;
        q.validate()?;
        Ok(q)
    }
}

fn set_exact_weights(exec: &mut ExecLayer, kind: &QLayerKind) {
    match (&mut exec.op, kind) {
        (Op::Dense { weights, .. }, QLayerKind::Dense { weights: q, .. })
        | (Op::Conv3d { weights, .. }, QLayerKind::Conv3d { weights: q, .. }) => {
            *weights = q.dequantize();
        }
        _ => {}
    }
}

pub fn quantized_forward(qmodel: &QuantizedModel, input: &crate::Patch3D) -> Result<nn::Forward> {
    qmodel.compile()?.forward(input)
}
