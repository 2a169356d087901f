//! Minimal feed-forward / 3D-convolutional inference engine.
//!
//! Models are plain layer lists ([`ModelSpec`]) that load from a JSON document
//! whose weight payloads are base64-encoded little-endian binary32 arrays.
//! Inference runs in double precision on the stored binary32 weights.
//!
//! Intermediate tensors are either volumes laid out `[channel][row][col][band]`
//! or flat vectors. An input patch is a one-channel volume, so a patch's
//! row-major `(row, col, band)` order is also the flattened order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::f32_b64;
use crate::error::{Error, Result};
use crate::patch::{Dims, Patch3D, PatchSet};
use crate::quant::QuantParams;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `weights` is `outputs × inputs`, row-major.
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(with = "f32_b64")]
        weights: Vec<f32>,
        #[serde(with = "f32_b64")]
        bias: Vec<f32>,
    },
    /// Valid-padding 3D convolution. `weights` is laid out
    /// `[out_channel][in_channel][k_row][k_col][k_band]`.
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        #[serde(with = "f32_b64")]
        weights: Vec<f32>,
        #[serde(with = "f32_b64")]
        bias: Vec<f32>,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn dense(
        name: &str,
        inputs: usize,
        outputs: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense {
                inputs,
                outputs,
                weights,
                bias,
            },
        }
    }

    pub fn conv3d(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv3d {
                in_channels,
                out_channels,
                kernel,
                stride,
                weights,
                bias,
            },
        }
    }

    pub fn relu(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Relu,
        }
    }

    pub fn flatten(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub version: u32,
    pub input_dims: Dims,
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Volume {
        channels: usize,
        rows: usize,
        cols: usize,
        bands: usize,
    },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Volume {
                channels,
                rows,
                cols,
                bands,
            } => channels * rows * cols * bands,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn of_input(d: Dims) -> Self {
        Shape::Volume {
            channels: 1,
            rows: d.rows,
            cols: d.cols,
            bands: d.bands,
        }
    }
}

impl ModelSpec {
    pub fn new(input_dims: Dims, class_count: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let model = Self {
            version: MODEL_VERSION,
            input_dims,
            class_count,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Output shape of every layer, checking weight payload sizes and
    /// finiteness on the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.version != MODEL_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported model version {}", self.version),
            });
        }
        if self.layers.is_empty() {
            return Err(Error::Shape("model has no layers".into()));
        }
        let mut shape = Shape::of_input(self.input_dims);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer_output_shape(layer, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let last = shapes.last().expect("non-empty");
        if last.len() != self.class_count {
            return Err(Error::Shape(format!(
                "final layer emits {} values but class_count is {}",
                last.len(),
                self.class_count
            )));
        }
        if self.class_count == 0 {
            return Err(Error::Shape("class_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ModelSpec = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model serializes");
        hex_digest(&bytes)
    }

    pub fn compile(&self) -> Result<Network> {
        Network::from_model(self)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn layer_output_shape(layer: &LayerSpec, input: Shape) -> Result<Shape> {
    let err = |msg: String| Error::Shape(format!("layer '{}': {msg}", layer.name));
    match &layer.kind {
        LayerKind::Dense {
            inputs,
            outputs,
            weights,
            bias,
        } => {
            if input.len() != *inputs {
                return Err(err(format!(
                    "expects {inputs} inputs, receives {}",
                    input.len()
                )));
            }
            if weights.len() != inputs * outputs || bias.len() != *outputs {
                return Err(err(format!(
                    "weights {} / bias {} inconsistent with {outputs}x{inputs}",
                    weights.len(),
                    bias.len()
                )));
            }
            check_finite(&layer.name, weights)?;
            check_finite(&layer.name, bias)?;
            Ok(Shape::Flat(*outputs))
        }
        LayerKind::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias,
        } => {
            let Shape::Volume {
                channels,
                rows,
                cols,
                bands,
            } = input
            else {
                return Err(err("conv3d needs a volume input".into()));
            };
            if channels != *in_channels {
                return Err(err(format!(
                    "expects {in_channels} channels, receives {channels}"
                )));
            }
            if kernel.contains(&0) || stride.contains(&0) {
                return Err(err("kernel and stride must be >= 1".into()));
            }
            let dims = [rows, cols, bands];
            if dims.iter().zip(kernel).any(|(d, k)| d < k) {
                return Err(err(format!("kernel {kernel:?} larger than input {dims:?}")));
            }
            let k_len = kernel.iter().product::<usize>();
            if weights.len() != out_channels * in_channels * k_len || bias.len() != *out_channels {
                return Err(err(format!(
                    "weights {} / bias {} inconsistent with kernel {kernel:?}",
                    weights.len(),
                    bias.len()
                )));
            }
            check_finite(&layer.name, weights)?;
            check_finite(&layer.name, bias)?;
            let o = |d: usize, k: usize, s: usize| (d - k) / s + 1;
            Ok(Shape::Volume {
                channels: *out_channels,
                rows: o(rows, kernel[0], stride[0]),
                cols: o(cols, kernel[1], stride[1]),
                bands: o(bands, kernel[2], stride[2]),
            })
        }
        LayerKind::Relu => Ok(input),
        LayerKind::Flatten => Ok(Shape::Flat(input.len())),
    }
}

fn check_finite(name: &str, values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Shape(format!(
            "layer '{name}': non-finite weight at {i}"
        ))),
        None => Ok(()),
    }
}

/// Post-activation outputs of the hidden layers for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<TracedLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracedLayer {
    pub name: String,
    pub values: Vec<f64>,
}

impl ActivationTrace {
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    /// All neuron outputs in global neuron-id order.
    pub fn neurons(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.values.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub trace: ActivationTrace,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Flatten,
}

#[derive(Debug, Clone)]
pub(crate) struct ExecLayer {
    pub name: String,
    pub op: Op,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub traced: bool,
    /// Fake-quantization applied to this layer's output (full PTQ only).
    pub output_quant: Option<QuantParams>,
}

/// A model prepared for repeated inference. Built from either a
/// full-precision [`ModelSpec`] or a [`crate::quant::QuantizedModel`].
#[derive(Debug, Clone)]
pub struct Network {
    pub(crate) input_dims: Dims,
    pub(crate) class_count: usize,
    pub(crate) input_quant: Option<QuantParams>,
    pub(crate) layers: Vec<ExecLayer>,
}

/// Whether layer `i`'s output enters the activation trace: every relu output,
/// plus any hidden affine output not followed by a relu. The final layer
/// (logits) and flatten reshapes are never traced.
pub(crate) fn traced_flags(kinds: &[&LayerKind]) -> Vec<bool> {
    let n = kinds.len();
    (0..n)
        .map(|i| {
            if i + 1 == n {
                return false;
            }
            match kinds[i] {
                LayerKind::Relu => true,
                LayerKind::Flatten => false,
                _ => !matches!(kinds.get(i + 1), Some(LayerKind::Relu)),
            }
        })
        .collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl Network {
    pub(crate) fn from_model(model: &ModelSpec) -> Result<Self> {
        model.validate()?;
        let shapes = model.shapes()?;
        let kinds: Vec<&LayerKind> = model.layers.iter().map(|l| &l.kind).collect();
        let traced = traced_flags(&kinds);
        let mut input_shape = Shape::of_input(model.input_dims);
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, l) in model.layers.iter().enumerate() {
            let op = match &l.kind {
                LayerKind::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => Op::Dense {
                    inputs: *inputs,
                    outputs: *outputs,
                    weights: widen(weights),
                    bias: widen(bias),
                },
                LayerKind::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weights,
                    bias,
                } => Op::Conv3d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    weights: widen(weights),
                    bias: widen(bias),
                },
                LayerKind::Relu => Op::Relu,
                LayerKind::Flatten => Op::Flatten,
            };
            layers.push(ExecLayer {
                name: l.name.clone(),
                op,
                input_shape,
                output_shape: shapes[i],
                traced: traced[i],
                output_quant: None,
            });
            input_shape = shapes[i];
        }
        Ok(Self {
            input_dims: model.input_dims,
            class_count: model.class_count,
            input_quant: None,
            layers,
        })
    }

    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Names and sizes of the traced layers, in trace order.
    pub fn traced_layers(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter(|l| l.traced)
            .map(|l| (l.name.clone(), l.output_shape.len()))
            .collect()
    }

    pub fn forward(&self, input: &Patch3D) -> Result<Forward> {
        if input.dims() != self.input_dims {
            return Err(Error::Shape(format!(
                "input dims {} do not match model input {}",
                input.dims(),
                self.input_dims
            )));
        }
        let mut x: Vec<f64> = input.values().iter().map(|&v| v as f64).collect();
        if let Some(q) = self.input_quant {
            q.fake_quant_slice(&mut x);
        }
        let mut trace = Vec::new();
        for layer in &self.layers {
            x = apply_op(&layer.op, layer.input_shape, layer.output_shape, &x);
            if let Some(q) = layer.output_quant {
                q.fake_quant_slice(&mut x);
            }
            if layer.traced {
                trace.push(TracedLayer {
                    name: layer.name.clone(),
                    values: x.clone(),
                });
            }
        }
        Ok(Forward {
            logits: x,
            trace: ActivationTrace { layers: trace },
        })
    }

    /// Output of every layer (pre-quantization in full PTQ mode is not
    /// distinguished; this is the float network used for calibration).
    pub(crate) fn layer_outputs(&self, input: &Patch3D) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if input.dims() != self.input_dims {
            return Err(Error::Shape(format!(
                "input dims {} do not match model input {}",
                input.dims(),
                self.input_dims
            )));
        }
        let x0: Vec<f64> = input.values().iter().map(|&v| v as f64).collect();
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut x = x0.clone();
        for layer in &self.layers {
            x = apply_op(&layer.op, layer.input_shape, layer.output_shape, &x);
            outs.push(x.clone());
        }
        Ok((x0, outs))
    }
}

fn apply_op(op: &Op, input_shape: Shape, output_shape: Shape, x: &[f64]) -> Vec<f64> {
    match op {
        Op::Dense {
            inputs,
            outputs,
            weights,
            bias,
        } => (0..*outputs)
            .map(|o| {
                let row = &weights[o * inputs..(o + 1) * inputs];
                bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect(),
        Op::Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weights,
            bias,
        } => {
            let Shape::Volume {
                rows, cols, bands, ..
            } = input_shape
            else {
                unreachable!("validated as volume")
            };
            let Shape::Volume {
                rows: orows,
                cols: ocols,
                bands: obands,
                ..
            } = output_shape
            else {
                unreachable!("validated as volume")
            };
            let [kr, kc, kb] = *kernel;
            let k_len = kr * kc * kb;
            let mut out = Vec::with_capacity(output_shape.len());
            for oc in 0..*out_channels {
                for r in 0..orows {
                    for c in 0..ocols {
                        for b in 0..obands {
                            let mut acc = bias[oc];
                            for ic in 0..*in_channels {
                                let w = &weights[(oc * in_channels + ic) * k_len..][..k_len];
                                let base = ic * rows * cols * bands;
                                for dr in 0..kr {
                                    for dc in 0..kc {
                                        let row_off = base
                                            + ((r * stride[0] + dr) * cols + c * stride[1] + dc)
                                                * bands
                                            + b * stride[2];
                                        let wk = &w[(dr * kc + dc) * kb..][..kb];
                                        for (db, wv) in wk.iter().enumerate() {
                                            acc += wv * x[row_off + db];
                                        }
                                    }
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
            }
            out
        }
        Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Op::Flatten => x.to_vec(),
    }
}

pub fn forward(model: &ModelSpec, input: &Patch3D) -> Result<Forward> {
    model.compile()?.forward(input)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_label(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Argument(
            "cannot take argmax of an empty vector".into(),
        ));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

pub const DEFAULT_SECTIONS: u32 = 10;

/// Per-neuron activation ranges observed on a profiling set, divided into
/// `k` equal sections for k-multisection coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronIntervals {
    pub k: u32,
    /// `(name, neuron count)` of every traced layer, in trace order.
    pub layers: Vec<(String, usize)>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl NeuronIntervals {
    pub fn neuron_count(&self) -> usize {
        self.low.len()
    }

    pub fn is_degenerate(&self, neuron: usize) -> bool {
        self.low[neuron] == self.high[neuron]
    }

    pub fn degenerate_count(&self) -> usize {
        (0..self.neuron_count())
            .filter(|&n| self.is_degenerate(n))
            .count()
    }

    /// Section index of `value` for `neuron`, or `None` when the neuron is
    /// degenerate or the value lies outside the profiled interval.
    pub fn section(&self, neuron: usize, value: f64) -> Option<u32> {
        let (low, high) = (self.low[neuron], self.high[neuron]);
        if low == high || !(value >= low && value <= high) {
            return None;
        }
        let k = self.k as f64;
        let s = ((value - low) * k / (high - low)).floor() as u32;
        Some(s.min(self.k - 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Argument(format!(
                "section count k must be >= 2, got {}",
                self.k
            )));
        }
        if self.low.len() != self.high.len()
            || self.layers.iter().map(|l| l.1).sum::<usize>() != self.low.len()
        {
            return Err(Error::Shape(
                "interval arrays disagree with layer sizes".into(),
            ));
        }
        if let Some(i) = (0..self.low.len()).find(|&i| !(self.low[i] <= self.high[i])) {
            return Err(Error::Argument(format!("neuron {i} has low > high")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let iv: NeuronIntervals = serde_json::from_str(&text)?;
        iv.validate()?;
        Ok(iv)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn profile_intervals(
    model: &ModelSpec,
    profiling_set: &PatchSet,
    k: u32,
) -> Result<NeuronIntervals> {
    if profiling_set.is_empty() {
        return Err(Error::Argument("profiling set is empty".into()));
    }
    if k < 2 {
        return Err(Error::Argument(format!(
            "section count k must be >= 2, got {k}"
        )));
    }
    let net = model.compile()?;
    let layers = net.traced_layers();
    let m: usize = layers.iter().map(|l| l.1).sum();
    let mut low = vec![f64::INFINITY; m];
    let mut high = vec![f64::NEG_INFINITY; m];
    for patch in &profiling_set.patches {
        let fwd = net.forward(patch)?;
        for (i, v) in fwd.trace.neurons().enumerate() {
            low[i] = low[i].min(v);
            high[i] = high[i].max(v);
        }
    }
    Ok(NeuronIntervals {
        k,
        layers,
        low,
        high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(dims: Dims, v: Vec<f32>) -> Patch3D {
        Patch3D::new(dims, v, None).unwrap()
    }

    #[test]
    fn identity_dense() {
        let d = Dims::new(1, 1, 3);
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = ModelSpec::new(d, 3, vec![LayerSpec::dense("fc", 3, 3, w, vec![0.0; 3])]).unwrap();
        let out = forward(&m, &patch(d, vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out.logits, vec![1.0, 2.0, 3.0]);
        assert!(out.trace.layers.is_empty());
    }

    #[test]
    fn relu_clamps_negatives() {
        let d = Dims::new(1, 1, 3);
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = ModelSpec::new(
            d,
            3,
            vec![
                LayerSpec::dense("fc1", 3, 3, w.clone(), vec![0.0; 3]),
                LayerSpec::relu("act"),
                LayerSpec::dense("fc2", 3, 3, w, vec![0.0; 3]),
            ],
        )
        .unwrap();
        let out = forward(&m, &patch(d, vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(out.trace.layers.len(), 1);
        assert_eq!(out.trace.layers[0].values, vec![0.0, 0.0, 2.0]);
        assert_eq!(out.logits, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_error_names_layer() {
        let d = Dims::new(1, 1, 3);
        let r = ModelSpec::new(
            d,
            2,
            vec![LayerSpec::dense("head", 4, 2, vec![0.0; 8], vec![0.0; 2])],
        );
        match r {
            Err(Error::Shape(msg)) => assert!(msg.contains("head"), "{msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let m = ModelSpec::new(
            d,
            3,
            vec![LayerSpec::dense("fc", 3, 3, vec![0.0; 9], vec![0.0; 3])],
        )
        .unwrap();
        assert!(matches!(
            forward(&m, &patch(Dims::new(1, 3, 1), vec![0.0; 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(predict_label(&[0.1, 0.9]).unwrap(), 1);
        assert_eq!(predict_label(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(predict_label(&[3.0, 1.0, 3.0]).unwrap(), 0);
        assert!(predict_label(&[]).is_err());
    }

    #[test]
    fn conv3d_sums_window() {
        // all-ones 2x2x2 kernel over a 3x3x2 ramp, stride 1
        let d = Dims::new(3, 3, 2);
        let values: Vec<f32> = (0..18).map(|v| v as f32).collect();
        let m = ModelSpec::new(
            d,
            4,
            vec![LayerSpec::conv3d(
                "c",
                1,
                1,
                [2, 2, 2],
                [1, 1, 1],
                vec![1.0; 8],
                vec![0.5],
            )],
        )
        .unwrap();
        let p = patch(d, values);
        let out = forward(&m, &p).unwrap();
        let mut expect = Vec::new();
        for r in 0..2 {
            for c in 0..2 {
                let mut s = 0.5;
                for dr in 0..2 {
                    for dc in 0..2 {
                        for b in 0..2 {
                            s += p.get(r + dr, c + dc, b) as f64;
                        }
                    }
                }
                expect.push(s);
            }
        }
        assert_eq!(out.logits, expect);
    }

    #[test]
    fn trace_rule() {
        let dense = LayerKind::Dense {
            inputs: 1,
            outputs: 1,
            weights: vec![1.0],
            bias: vec![0.0],
        };
        let kinds = vec![
            &dense,
            &LayerKind::Relu,
            &LayerKind::Flatten,
            &dense,
            &dense,
        ];
        assert_eq!(traced_flags(&kinds), vec![false, true, false, true, false]);
    }

    #[test]
    fn intervals_min_max_and_sections() {
        let d = Dims::new(1, 1, 1);
        let m = ModelSpec::new(
            d,
            1,
            vec![
                LayerSpec::dense("a", 1, 2, vec![1.0, 0.0], vec![0.0, 0.7]),
                LayerSpec::relu("r"),
                LayerSpec::dense("h", 2, 1, vec![1.0, 1.0], vec![0.0]),
            ],
        )
        .unwrap();
        let set = PatchSet::new(
            [0.0f32, 1.0, 0.5]
                .iter()
                .map(|&v| patch(d, vec![v]))
                .collect(),
            "t",
        )
        .unwrap();
        let iv = profile_intervals(&m, &set, 10).unwrap();
        assert_eq!(iv.low[0], 0.0);
        assert_eq!(iv.high[0], 1.0);
        assert!(!iv.is_degenerate(0));
        assert!(iv.is_degenerate(1));
        assert_eq!(iv.section(0, 0.0), Some(0));
        assert_eq!(iv.section(0, 1.0), Some(9));
        assert_eq!(iv.section(0, 0.25), Some(2));
        assert_eq!(iv.section(0, 1.5), None);
        assert_eq!(iv.section(1, 0.7), None);
        assert!(profile_intervals(&m, &set, 1).is_err());
        assert!(profile_intervals(&m, &PatchSet::new(vec![], "e").unwrap(), 10).is_err());
    }

    #[test]
    fn section_matches_enumeration() {
        let iv = NeuronIntervals {
            k: 10,
            layers: vec![("x".into(), 1)],
            low: vec![0.0],
            high: vec![1.0],
        };
        // section s covers [s/10, (s+1)/10) except the last, which is closed
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            let expect = (0..10u32)
                .find(|&s| {
                    let lo = s as f64 / 10.0;
                    let hi = (s + 1) as f64 / 10.0;
                    (v >= lo && v < hi) || (s == 9 && v == 1.0)
                })
                .unwrap();
            let got = iv.section(0, v).unwrap();
            // floating boundaries like 0.3 may land one section apart
            assert!(
                got == expect
                    || (got as i64 - expect as i64).abs() == 1 && (v * 10.0).fract().abs() < 1e-9,
                "{v}"
            );
        }
    }

    #[test]
    fn model_json_round_trip() {
        let d = Dims::new(1, 1, 2);
        let m = ModelSpec::new(
            d,
            2,
            vec![LayerSpec::dense(
                "fc",
                2,
                2,
                vec![0.1, -0.2, 3.5, 1e-7],
                vec![0.0, 1.0],
            )],
        )
        .unwrap();
        let text = m.to_json().unwrap();
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }
}
