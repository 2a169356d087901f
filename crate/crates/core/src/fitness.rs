//! Test-adequacy objectives: softmax Jensen-Shannon divergence between the
//! two models' outputs, and k-multisection coverage dissimilarity of their
//! hidden activations, plus single-patch and batch evaluation.
//!
//! Divergences use the natural logarithm, so JSD lies in `[0, ln 2]`.

use serde::{Deserialize, Serialize};

use crate::distortion::{decode, Layout};
use crate::error::{Error, Result};
use crate::nn::{predict_label, ActivationTrace, Network, NeuronIntervals};
use crate::patch::{psnr, Patch3D};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Wraps `values` after checking non-negativity and unit sum (1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Argument("probabilities must be non-negative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> ProbabilityVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbabilityVector(exps.into_iter().map(|e| e / sum).collect())
}

/// Natural-log KL divergence with `0 · ln(0 / r) = 0`.
pub fn kl_divergence(q: &ProbabilityVector, r: &ProbabilityVector) -> Result<f64> {
    if q.len() != r.len() {
        return Err(Error::Shape(format!(
            "KL over lengths {} and {}",
            q.len(),
            r.len()
        )));
    }
    Ok(q.0
        .iter()
        .zip(&r.0)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &ri)| qi * (qi / ri).ln())
        .sum::<f64>()
        .max(0.0))
}

pub fn jsd(q: &ProbabilityVector, r: &ProbabilityVector) -> Result<f64> {
    if q.len() != r.len() {
        return Err(Error::Shape(format!(
            "JSD over lengths {} and {}",
            q.len(),
            r.len()
        )));
    }
    let m = ProbabilityVector(q.0.iter().zip(&r.0).map(|(a, b)| 0.5 * (a + b)).collect());
    Ok(0.5 * (kl_divergence(q, &m)? + kl_divergence(r, &m)?))
}

/// Divergence objective: JSD of the two softmax outputs.
pub fn f_div(original_logits: &[f64], quantized_logits: &[f64]) -> Result<f64> {
    jsd(&softmax(original_logits), &softmax(quantized_logits))
}

/// Covered `(neuron, section)` pairs, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationSignature {
    pairs: Vec<(u32, u32)>,
}

impl ActivationSignature {
    pub fn from_pairs(mut pairs: Vec<(u32, u32)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < self.pairs.len() && j < other.pairs.len() {
            match self.pairs[i].cmp(&other.pairs[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

/// Sections covered by a trace. Degenerate neurons and activations outside
/// the profiled interval contribute nothing.
pub fn signature(
    trace: &ActivationTrace,
    intervals: &NeuronIntervals,
) -> Result<ActivationSignature> {
    if trace.neuron_count() != intervals.neuron_count() {
        return Err(Error::Shape(format!(
            "trace has {} neurons, intervals cover {}",
            trace.neuron_count(),
            intervals.neuron_count()
        )));
    }
    let pairs = trace
        .neurons()
        .enumerate()
        .filter_map(|(n, v)| intervals.section(n, v).map(|s| (n as u32, s)))
        .collect();
    // already sorted by neuron with one section each
    Ok(ActivationSignature { pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JaccardFormula {
    /// `|A∩B| / (|A| + |B| + |A∩B|)`; at most 1/3.
    #[default]
    Additive,
    /// `|A∩B| / (|A| + |B| − |A∩B|)`.
    Standard,
}

/// Similarity of two signatures; two empty signatures score 0.
pub fn jaccard(a: &ActivationSignature, b: &ActivationSignature, formula: JaccardFormula) -> f64 {
    let inter = a.intersection_len(b) as f64;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let denom = match formula {
        JaccardFormula::Additive => na + nb + inter,
        JaccardFormula::Standard => na + nb - inter,
    };
    if denom == 0.0 {
        0.0
    } else {
        inter / denom
    }
}

pub fn jaccard_additive(a: &ActivationSignature, b: &ActivationSignature) -> f64 {
    jaccard(a, b, JaccardFormula::Additive)
}

/// Coverage objective: negated signature similarity.
pub fn f_cov(
    trace_o: &ActivationTrace,
    trace_q: &ActivationTrace,
    intervals: &NeuronIntervals,
    formula: JaccardFormula,
) -> Result<f64> {
    let a = signature(trace_o, intervals)?;
    let b = signature(trace_q, intervals)?;
    Ok(-jaccard(&a, &b, formula))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Div,
    Cov,
}

/// The two models under test plus the coverage profile.
#[derive(Debug, Clone)]
pub struct Subjects {
    pub original: Network,
    pub quantized: Network,
    pub intervals: Option<NeuronIntervals>,
}

impl Subjects {
    pub fn new(
        original: Network,
        quantized: Network,
        intervals: Option<NeuronIntervals>,
    ) -> Result<Self> {
        if original.input_dims() != quantized.input_dims()
            || original.class_count() != quantized.class_count()
        {
            return Err(Error::Config(format!(
                "models disagree on geometry: {} / {} classes vs {} / {} classes",
                original.input_dims(),
                original.class_count(),
                quantized.input_dims(),
                quantized.class_count()
            )));
        }
        if original.traced_layers() != quantized.traced_layers() {
            return Err(Error::Config("models trace different hidden layers".into()));
        }
        if let Some(iv) = &intervals {
            if iv.layers != original.traced_layers() {
                return Err(Error::Config(
                    "intervals were profiled on a different model".into(),
                ));
            }
        }
        Ok(Self {
            original,
            quantized,
            intervals,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessSettings {
    pub objective: Objective,
    pub jaccard: JaccardFormula,
    pub psnr_threshold: f64,
}

impl Default for FitnessSettings {
    fn default() -> Self {
        Self {
            objective: Objective::Div,
            jaccard: JaccardFormula::Additive,
            psnr_threshold: crate::patch::DEFAULT_PSNR_THRESHOLD,
        }
    }
}

/// One original patch taking part in an evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SeedPatch<'a> {
    /// Index of the patch in its source set.
    pub index: u32,
    pub patch: &'a Patch3D,
    /// Label the original model predicts on the undistorted patch.
    pub original_prediction: usize,
}

impl SeedPatch<'_> {
    /// Whether the original model is right on the undistorted patch.
    pub fn original_correct(&self) -> bool {
        self.patch.label() == Some(self.original_prediction as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub patch_index: u32,
    pub fitness: f64,
    pub psnr: f64,
    pub valid: bool,
    pub original_label: usize,
    pub quantized_label: usize,
    pub dii: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fitness: f64,
    pub details: Vec<PatchOutcome>,
}

/// Fitness of one patch under `vector`.
pub fn evaluate_patch(
    layout: &Layout,
    vector: &[f64],
    seed: u64,
    subjects: &Subjects,
    settings: &FitnessSettings,
    item: &SeedPatch<'_>,
) -> Result<PatchOutcome> {
    let distorted = decode(layout, vector, item.patch, seed)?;
    let fo = subjects.original.forward(&distorted)?;
    let fq = subjects.quantized.forward(&distorted)?;
    let fitness = match settings.objective {
        Objective::Div => f_div(&fo.logits, &fq.logits)?,
        Objective::Cov => {
            let iv = subjects
                .intervals
                .as_ref()
                .ok_or_else(|| Error::Config("coverage objective needs neuron intervals".into()))?;
            f_cov(&fo.trace, &fq.trace, iv, settings.jaccard)?
        }
    };
    let db = psnr(item.patch, &distorted)?;
    let valid = db >= settings.psnr_threshold;
    let original_label = predict_label(&fo.logits)?;
    let quantized_label = predict_label(&fq.logits)?;
    Ok(PatchOutcome {
        patch_index: item.index,
        fitness,
        psnr: db,
        valid,
        original_label,
        quantized_label,
        dii: valid && original_label != quantized_label && item.original_correct(),
    })
}

/// Single mode is a batch of one. Batch fitness is the mean over patches,
/// summed in index order.
pub fn evaluate(
    layout: &Layout,
    vector: &[f64],
    seed: u64,
    subjects: &Subjects,
    settings: &FitnessSettings,
    batch: &[SeedPatch<'_>],
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Argument("evaluation batch is empty".into()));
    }
    let details = batch
        .iter()
        .map(|item| evaluate_patch(layout, vector, seed, subjects, settings, item))
        .collect::<Result<Vec<_>>>()?;
    let fitness = details.iter().map(|d| d.fitness).sum::<f64>() / details.len() as f64;
    Ok(Evaluation { fitness, details })
}
