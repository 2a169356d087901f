//! Seed-deterministic fixture models and patches.
//!
//! Nothing here is trained. The random models give the forward pass and the
//! quantizer something non-trivial to chew on; the boundary model is built by
//! hand so that int8 weight rounding moves its decision boundary by a known
//! amount, which gives the search something to find.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::{LayerSpec, ModelSpec};
use crate::patch::{Dims, Patch3D, PatchSet};

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// Conv3d(1→2) → ReLU → Flatten → Dense(→classes). The kernel is 3 per axis,
/// shrunk to fit small inputs.
pub fn random_conv_model(dims: Dims, classes: usize, seed: u64) -> Result<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = [dims.rows.min(3), dims.cols.min(3), dims.bands.min(3)];
    let channels = 2;
    let fan_in = kernel.iter().product::<usize>();
    let conv_w = gaussian(&mut rng, channels * fan_in, 1.0 / (fan_in as f64).sqrt());
    let conv_b = gaussian(&mut rng, channels, 0.1);
    let out =
        (dims.rows - kernel[0] + 1) * (dims.cols - kernel[1] + 1) * (dims.bands - kernel[2] + 1);
    let flat = channels * out;
    let dense_w = gaussian(&mut rng, classes * flat, 1.0 / (flat as f64).sqrt());
    let dense_b = gaussian(&mut rng, classes, 0.1);
    ModelSpec::new(
        dims,
        classes,
        vec![
            LayerSpec::conv3d("conv", 1, channels, kernel, [1, 1, 1], conv_w, conv_b),
            LayerSpec::relu("conv_relu"),
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("logits", flat, classes, dense_w, dense_b),
        ],
    )
}

/// Flatten → Dense(→hidden) → ReLU → Dense(→classes), Gaussian weights.
pub fn random_mlp(dims: Dims, hidden: usize, classes: usize, seed: u64) -> Result<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.len();
    let w1 = gaussian(&mut rng, hidden * n, 1.0 / (n as f64).sqrt());
    let b1 = gaussian(&mut rng, hidden, 0.1);
    let w2 = gaussian(&mut rng, classes * hidden, 1.0 / (hidden as f64).sqrt());
    let b2 = gaussian(&mut rng, classes, 0.1);
    ModelSpec::new(
        dims,
        classes,
        vec![
            LayerSpec::flatten("flatten"),
            LayerSpec::dense("hidden", n, hidden, w1, b1),
            LayerSpec::relu("hidden_relu"),
            LayerSpec::dense("logits", hidden, classes, w2, b2),
        ],
    )
}

/// `n` patches with values uniform in [0, 1). With `classes` set, each patch
/// gets a uniform random label below it.
pub fn random_patchset(dims: Dims, n: usize, seed: u64, classes: Option<u32>) -> PatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..n)
        .map(|_| {
            let values = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
            let label = classes.map(|c| rng.random_range(0..c));
            Patch3D::new(dims, values, label).expect("finite values")
        })
        .collect();
    PatchSet::new(patches, format!("random {dims} seed {seed}")).expect("uniform dims")
}

/// Relabels every patch with the model's own prediction.
pub fn label_by_model(model: &ModelSpec, set: &PatchSet) -> Result<PatchSet> {
    let net = model.compile()?;
    let patches = set
        .patches
        .iter()
        .map(|p| {
            let label = crate::nn::predict_label(&net.forward(p)?.logits)?;
            Ok(p.clone().with_label(Some(label as u32)))
        })
        .collect::<Result<Vec<_>>>()?;
    PatchSet::new(patches, set.provenance.clone())
}

/// Hand-set two-class model whose decision depends only on the patch mean
/// `m`:
///
/// ```text
/// h0 = relu(m), h1 = relu(1 - m)
/// l0 = GAIN * h0
/// l1 = GAIN * (b * h0 + c * h1),  b = BETA_STEPS / 127, c = OFFSET_STEPS / 127
/// ```
///
/// Class 1 wins while `m < c / (1 + c - b)`. `GAIN` is the largest weight of
/// the head, so the int8 grid is `GAIN / 127` and `b` sits between two grid
/// points. Rounding pulls `b` down and the quantized model gives up class 1 at
/// a lower mean; patches whose mean falls between the two thresholds are
/// classified 1 in float and 0 in int8.
pub struct BoundaryToy;

impl BoundaryToy {
    pub const DIMS: Dims = Dims {
        rows: 5,
        cols: 5,
        bands: 4,
    };
    pub const GAIN: f32 = 8000.0;
    pub const BETA_STEPS: f32 = 120.01;
    pub const OFFSET_STEPS: f32 = 3.0;
    /// Shared spectral shape of the seed patches, around their mean.
    pub const SPECTRUM: [f64; 4] = [-0.04, 0.01, 0.045, -0.015];

    fn threshold(beta_steps: f64) -> f64 {
        let c = Self::OFFSET_STEPS as f64;
        c / (127.0 + c - beta_steps)
    }

    pub fn model() -> ModelSpec {
        let dims = Self::DIMS;
        let n = dims.len();
        let inv = 1.0 / n as f32;
        let mut w1 = vec![inv; n];
        w1.extend(std::iter::repeat_n(-inv, n));
        let g = Self::GAIN;
        let w2 = vec![
            g,
            0.0,
            g * Self::BETA_STEPS / 127.0,
            g * Self::OFFSET_STEPS / 127.0,
        ];
        ModelSpec::new(
            dims,
            2,
            vec![
                LayerSpec::flatten("flatten"),
                LayerSpec::dense("mean", n, 2, w1, vec![0.0, 1.0]),
                LayerSpec::relu("mean_relu"),
                LayerSpec::dense("logits", 2, 2, w2, vec![0.0, 0.0]),
            ],
        )
        .expect("boundary model is well formed")
    }

    /// Mean above which the float model leaves class 1.
    pub fn float_threshold() -> f64 {
        Self::threshold(Self::BETA_STEPS as f64)
    }

    /// Mean above which the weights-only int8 model leaves class 1.
    pub fn quantized_threshold() -> f64 {
        Self::threshold((Self::BETA_STEPS as f64).round_ties_even())
    }

    /// How far below the int8 threshold the seed means sit. The near end is
    /// within casual reach of the default distortion bounds, the far end
    /// needs several distortions pushed together.
    pub const SEED_GAPS: (f64, f64) = (0.010, 0.016);

    /// Spatially smooth class-1 patches with means spread below the int8
    /// threshold, `gap_lo..gap_hi` under it.
    pub fn seed_patches(n: usize, gap_lo: f64, gap_hi: f64, seed: u64) -> PatchSet {
        let dims = Self::DIMS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let threshold = Self::quantized_threshold();
        let patches = (0..n)
            .map(|i| {
                let t = if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.5
                };
                let target = threshold - (gap_lo + t * (gap_hi - gap_lo));
                let mut values = Vec::with_capacity(dims.len());
                for r in 0..dims.rows {
                    for c in 0..dims.cols {
                        let ramp = 0.004 * (r as f64 - 2.0) + 0.003 * (c as f64 - 2.0);
                        for s in Self::SPECTRUM {
                            let jitter = rng.random_range(-0.002..0.002);
                            values.push(s + ramp + jitter);
                        }
                    }
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let values = values.iter().map(|v| (v - mean + target) as f32).collect();
                Patch3D::new(dims, values, Some(1)).expect("finite values")
            })
            .collect();
        PatchSet::new(patches, format!("boundary seeds {n} seed {seed}")).expect("uniform dims")
    }

    /// The twenty seed patches used for search comparisons.
    pub fn pinned_seeds() -> PatchSet {
        Self::seed_patches(20, Self::SEED_GAPS.0, Self::SEED_GAPS.1, 7)
    }

    /// Constant patch filled with `value`, for one-dimensional sweeps.
    pub fn constant(value: f32) -> Patch3D {
        Patch3D::filled(Self::DIMS, value).expect("finite value")
    }
}
