//! Straight-line reference implementations, written from the definitions
//! rather than from the library code. Slow on purpose.

#![allow(dead_code)]

use qdiff::nn::{LayerKind, ModelSpec};
use qdiff::{Patch3D, PatchSet};

/// A tensor as (channels, rows, cols, bands) or a flat vector.
#[derive(Clone, Debug)]
pub enum T {
    Vol(Vec<Vec<Vec<Vec<f64>>>>),
    Flat(Vec<f64>),
}

impl T {
    pub fn values(&self) -> Vec<f64> {
        match self {
            T::Vol(v) => v.iter().flatten().flatten().flatten().copied().collect(),
            T::Flat(v) => v.clone(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> T {
        match self {
            T::Vol(v) => T::Vol(
                v.iter()
                    .map(|ch| {
                        ch.iter()
                            .map(|r| {
                                r.iter()
                                    .map(|c| c.iter().map(|&x| f(x)).collect())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
            ),
            T::Flat(v) => T::Flat(v.iter().map(|&x| f(x)).collect()),
        }
    }
}

pub fn input(p: &Patch3D) -> T {
    let d = p.dims();
    let cube = (0..d.rows)
        .map(|r| {
            (0..d.cols)
                .map(|c| (0..d.bands).map(|b| p.get(r, c, b) as f64).collect())
                .collect()
        })
        .collect();
    T::Vol(vec![cube])
}

fn dense(w: &[f64], bias: &[f32], inputs: usize, outputs: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), inputs);
    let mut y = vec![0.0; outputs];
    for (o, yo) in y.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (i, xi) in x.iter().enumerate() {
            acc += w[o * inputs + i] * xi;
        }
        *yo = acc + bias[o] as f64;
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv(
    w: &[f64],
    bias: &[f32],
    in_ch: usize,
    out_ch: usize,
    k: [usize; 3],
    s: [usize; 3],
    x: &[Vec<Vec<Vec<f64>>>],
) -> Vec<Vec<Vec<Vec<f64>>>> {
    let (rows, cols, bands) = (x[0].len(), x[0][0].len(), x[0][0][0].len());
    let out_dim = |n: usize, k: usize, s: usize| (n - k) / s + 1;
    let (orr, oc, ob) = (
        out_dim(rows, k[0], s[0]),
        out_dim(cols, k[1], s[1]),
        out_dim(bands, k[2], s[2]),
    );
    let widx = |o: usize, i: usize, a: usize, b: usize, c: usize| {
        (((o * in_ch + i) * k[0] + a) * k[1] + b) * k[2] + c
    };
    let mut y = vec![vec![vec![vec![0.0; ob]; oc]; orr]; out_ch];
    for o in 0..out_ch {
        for r in 0..orr {
            for c in 0..oc {
                for b in 0..ob {
                    let mut acc = bias[o] as f64;
                    for i in 0..in_ch {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for cc in 0..k[2] {
                                    acc += w[widx(o, i, a, bb, cc)]
                                        * x[i][r * s[0] + a][c * s[1] + bb][b * s[2] + cc];
                                }
                            }
                        }
                    }
                    y[o][r][c][b] = acc;
                }
            }
        }
    }
    y
}

/// Weight transform applied before use: identity for the float model,
/// symmetric int8 round trip for the quantized one.
type WeightMap = fn(&[f32]) -> Vec<f64>;

fn as_f64(w: &[f32]) -> Vec<f64> {
    w.iter().map(|&v| v as f64).collect()
}

/// Per-tensor symmetric int8: scale = max|w| / 127, round half to even.
pub fn int8_weights(w: &[f32]) -> Vec<f64> {
    let m = w.iter().map(|v| (*v as f64).abs()).fold(0.0, f64::max);
    let s = if m == 0.0 { 1.0 } else { m / 127.0 };
    w.iter()
        .map(|&v| ((v as f64 / s).round_ties_even().clamp(-128.0, 127.0)) * s)
        .collect()
}

/// Fake quantization onto the affine int8 grid covering [lo, hi] ∪ {0}.
fn fq(lo: f64, hi: f64, x: f64) -> f64 {
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    if lo == hi {
        return x.round_ties_even().clamp(-128.0, 127.0);
    }
    let s = (hi - lo) / 255.0;
    let zp = (-128.0 - lo / s).round_ties_even().clamp(-128.0, 127.0);
    let q = ((x / s).round_ties_even() + zp).clamp(-128.0, 127.0);
    (q - zp) * s
}

/// Every intermediate, the input first, under `wmap` and an optional
/// per-stage output quantizer (`ranges[0]` for the input, then one per
/// layer).
fn run(model: &ModelSpec, p: &Patch3D, wmap: WeightMap, ranges: Option<&[(f64, f64)]>) -> Vec<T> {
    let q = |t: T, stage: usize| match ranges {
        Some(r) => {
            let (lo, hi) = r[stage];
            t.map(|x| fq(lo, hi, x))
        }
        None => t,
    };
    let mut stages = vec![q(input(p), 0)];
    for (li, layer) in model.layers.iter().enumerate() {
        let x = stages.last().unwrap().clone();
        let y = match (&layer.kind, x) {
            (
                LayerKind::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                },
                T::Flat(v),
            ) => T::Flat(dense(&wmap(weights), bias, *inputs, *outputs, &v)),
            (
                LayerKind::Conv3d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    weights,
                    bias,
                },
                T::Vol(v),
            ) => T::Vol(conv(
                &wmap(weights),
                bias,
                *in_channels,
                *out_channels,
                *kernel,
                *stride,
                &v,
            )),
            (LayerKind::Relu, t) => t.map(|v| if v > 0.0 { v } else { 0.0 }),
            (LayerKind::Flatten, t) => T::Flat(t.values()),
            (kind, _) => panic!("oracle cannot apply {kind:?} here"),
        };
        stages.push(q(y, li + 1));
    }
    stages
}

pub fn float_logits(model: &ModelSpec, p: &Patch3D) -> Vec<f64> {
    run(model, p, as_f64, None).last().unwrap().values()
}

pub fn weights_only_logits(model: &ModelSpec, p: &Patch3D) -> Vec<f64> {
    run(model, p, int8_weights, None).last().unwrap().values()
}

/// Min/max of the input and of every float layer output over `set`.
pub fn calibration_ranges(model: &ModelSpec, set: &PatchSet) -> Vec<(f64, f64)> {
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); model.layers.len() + 1];
    for p in &set.patches {
        for (r, t) in ranges.iter_mut().zip(run(model, p, as_f64, None)) {
            for v in t.values() {
                r.0 = r.0.min(v);
                r.1 = r.1.max(v);
            }
        }
    }
    ranges
}

pub fn full_int8_logits(model: &ModelSpec, ranges: &[(f64, f64)], p: &Patch3D) -> Vec<f64> {
    run(model, p, int8_weights, Some(ranges))
        .last()
        .unwrap()
        .values()
}

/// Largest absolute difference between two logit vectors of equal length.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Small fixture networks with at most three weight layers.
pub fn fixture_models(dims: qdiff::Dims, classes: usize, seed: u64) -> Vec<ModelSpec> {
    use qdiff::nn::LayerSpec;
    use qdiff::toy::{random_conv_model, random_mlp};
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut w = |n: usize, scale: f32| -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    };
    // Strided conv with no ReLU after it, then a hidden dense layer.
    let k = [2, 2, 3];
    let st = [2, 1, 2];
    let od = |n: usize, k: usize, s: usize| (n - k) / s + 1;
    let conv_out =
        3 * od(dims.rows, k[0], st[0]) * od(dims.cols, k[1], st[1]) * od(dims.bands, k[2], st[2]);
    let strided = ModelSpec::new(
        dims,
        classes,
        vec![
            LayerSpec::conv3d("conv", 1, 3, k, st, w(3 * 12, 0.5), w(3, 0.1)),
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("hidden", conv_out, 6, w(6 * conv_out, 0.4), w(6, 0.1)),
            LayerSpec::relu("hidden_relu"),
            LayerSpec::dense("logits", 6, classes, w(6 * classes, 0.6), w(classes, 0.1)),
        ],
    )
    .expect("strided fixture");
    vec![
        random_mlp(dims, 8, classes, seed).expect("mlp fixture"),
        random_conv_model(dims, classes, seed + 1).expect("conv fixture"),
        strided,
    ]
}

/// Traced neuron values following the trace rule: ReLU outputs, plus
/// Dense/Conv outputs not followed by a ReLU, excluding the final layer.
pub fn traced_values(model: &ModelSpec, p: &Patch3D) -> Vec<f64> {
    let stages = run(model, p, as_f64, None);
    let n = model.layers.len();
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let next_is_relu = matches!(
            model.layers.get(i + 1).map(|l| &l.kind),
            Some(LayerKind::Relu)
        );
        let traced = match layer.kind {
            LayerKind::Relu => true,
            LayerKind::Dense { .. } | LayerKind::Conv3d { .. } => !next_is_relu && i + 1 < n,
            LayerKind::Flatten => false,
        };
        if traced {
            out.extend(stages[i + 1].values());
        }
    }
    out
}
