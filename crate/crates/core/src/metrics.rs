//! Session metrics (#DII, DiR, SR, VR, FDI, FDI*) and the statistics used to
//! compare configurations: Vargha-Delaney Â12 and the Wilcoxon signed-rank
//! test.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-seed outcome of one search session. A "seed" is one original patch in
/// single mode, or one batch of patches in batch mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: usize,
    pub patch_indices: Vec<u32>,
    pub generations: usize,
    pub generated: u64,
    pub valid: u64,
    pub dii: u64,
    pub best_fitness: Vec<f64>,
    /// Seconds from the seed's first fitness evaluation to its first DII.
    pub fdi_seconds: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config: serde_json::Value,
    pub model_hash: String,
    pub quantized_model_hash: String,
    pub seeds: Vec<SeedRecord>,
    /// Set when the session stopped early on an error; the seeds listed are
    /// the ones completed before it.
    #[serde(default)]
    pub aborted: Option<String>,
}

impl SessionReport {
    pub fn total_dii(&self) -> u64 {
        self.seeds.iter().map(|s| s.dii).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.seeds {
            if s.valid > s.generated || s.dii > s.valid {
                return Err(Error::Format {
                    offset: 0,
                    message: format!(
                        "seed {}: counters out of order (generated {}, valid {}, dii {})",
                        s.seed, s.generated, s.valid, s.dii
                    ),
                });
            }
        }
        Ok(())
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
        let r: SessionReport = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            (a + b) / 2.0
        }
    })
}

fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSeed {
    pub values: Vec<f64>,
    pub median: Option<f64>,
}

impl PerSeed {
    fn from(values: Vec<f64>) -> Self {
        let median = median(&values);
        Self { values, median }
    }
}

/// DiR: `100 · dii / generated` per seed.
pub fn divergence_rate(report: &SessionReport) -> PerSeed {
    PerSeed::from(
        report
            .seeds
            .iter()
            .map(|s| percent(s.dii, s.generated))
            .collect(),
    )
}

/// VR: `100 · valid / generated` per seed.
pub fn validation_rate(report: &SessionReport) -> PerSeed {
    PerSeed::from(
        report
            .seeds
            .iter()
            .map(|s| percent(s.valid, s.generated))
            .collect(),
    )
}

/// SR: share of seeds with at least one DII, in percent.
pub fn success_rate(report: &SessionReport) -> f64 {
    percent(
        report.seeds.iter().filter(|s| s.dii >= 1).count() as u64,
        report.seeds.len() as u64,
    )
}

/// Median time to first disagreement. Unsuccessful seeds count with their
/// full wall time (FDI), or are left out when `successful_only` (FDI*).
pub fn fdi(report: &SessionReport, successful_only: bool) -> Option<f64> {
    let times: Vec<f64> = report
        .seeds
        .iter()
        .filter_map(|s| match s.fdi_seconds {
            Some(t) => Some(t),
            None if successful_only => None,
            None => Some(s.wall_seconds),
        })
        .collect();
    median(&times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    /// Classifies the scaled effect `2·|Â12 − 0.5|`.
    pub fn classify(scaled: f64) -> Self {
        let s = scaled.abs();
        if s < 0.147 {
            Magnitude::Negligible
        } else if s < 0.33 {
            Magnitude::Small
        } else if s < 0.474 {
            Magnitude::Medium
        } else {
            Magnitude::Large
        }
    }
}

impl std::fmt::Display for Magnitude {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Magnitude::Negligible => "negligible",
            Magnitude::Small => "small",
            Magnitude::Medium => "medium",
            Magnitude::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectSize {
    pub a12: f64,
    pub scaled: f64,
    pub magnitude: Magnitude,
}

/// Probability that a draw from `group1` beats one from `group2`, ties
/// counting half.
pub fn vargha_delaney_a12(group1: &[f64], group2: &[f64]) -> Result<EffectSize> {
    if group1.is_empty() || group2.is_empty() {
        return Err(Error::Argument("Â12 needs two non-empty groups".into()));
    }
    if group1.iter().chain(group2).any(|v| v.is_nan()) {
        return Err(Error::Argument("Â12 over NaN samples".into()));
    }
    let mut wins = 0.0;
    for &x in group1 {
        for &y in group2 {
            if x > y {
                wins += 1.0;
            } else if x == y {
                wins += 0.5;
            }
        }
    }
    let a12 = wins / (group1.len() * group2.len()) as f64;
    let scaled = 2.0 * (a12 - 0.5).abs();
    Ok(EffectSize {
        a12,
        scaled,
        magnitude: Magnitude::classify(scaled),
    })
}

/// Largest sample size for the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WilcoxonOutcome {
    /// Every difference was zero; there is nothing to test.
    Degenerate,
    Computed {
        /// `min(W+, W−)`.
        statistic: f64,
        w_plus: f64,
        p_value: f64,
        /// Non-zero differences used.
        n: usize,
        exact: bool,
    },
}

impl WilcoxonOutcome {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            WilcoxonOutcome::Degenerate => None,
            WilcoxonOutcome::Computed { p_value, .. } => Some(*p_value),
        }
    }
}

/// Average ranks (1-based) of `values`, which need not be sorted.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped and tied magnitudes share their average rank. Up to
/// [`WILCOXON_EXACT_MAX_N`] pairs the p-value comes from the exact null
/// distribution of the (tie-adjusted) ranks; beyond that a normal
/// approximation with continuity and tie correction is used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonOutcome> {
    if pairs.iter().any(|(a, b)| a.is_nan() || b.is_nan()) {
        return Err(Error::Argument("Wilcoxon over NaN samples".into()));
    }
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonOutcome::Degenerate);
    }
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&mags);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let exact = n <= WILCOXON_EXACT_MAX_N;
    let p_value = if exact {
        exact_p_value(&ranks, w_plus)
    } else {
        normal_p_value(&mags, w_plus)
    };
    Ok(WilcoxonOutcome::Computed {
        statistic,
        w_plus,
        p_value,
        n,
        exact,
    })
}

fn exact_p_value(ranks: &[f64], w_plus: f64) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total: f64 = counts.iter().sum();
    let observed = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / total;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p_value(mags: &[f64], w_plus: f64) -> f64 {
    let n = mags.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = mags.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (((w_plus - mean).abs() - 0.5).max(0.0)) / var.sqrt();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Column set of [`report_csv`].
pub const REPORT_CSV_HEADER: &str = "config,seed,patch_indices,generations,generated,valid,dii,\
dir_percent,vr_percent,fdi_seconds,wall_seconds,final_best_fitness";

/// One row per (config, seed).
pub fn report_csv(reports: &[(String, SessionReport)]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for (name, r) in reports {
        for s in &r.seeds {
            let patches: Vec<String> = s.patch_indices.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                name,
                s.seed,
                patches.join(";"),
                s.generations,
                s.generated,
                s.valid,
                s.dii,
                percent(s.dii, s.generated),
                percent(s.valid, s.generated),
                s.fdi_seconds.map_or(String::new(), |t| t.to_string()),
                s.wall_seconds,
                s.best_fitness
                    .last()
                    .map_or(String::new(), |f| f.to_string()),
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSummary {
    pub seeds: usize,
    pub total_dii: u64,
    pub median_dii: Option<f64>,
    pub median_dir: Option<f64>,
    pub median_vr: Option<f64>,
    pub success_rate: f64,
    pub fdi: Option<f64>,
    pub fdi_star: Option<f64>,
}

pub fn summarize(report: &SessionReport) -> ConfigSummary {
    let dii: Vec<f64> = report.seeds.iter().map(|s| s.dii as f64).collect();
    ConfigSummary {
        seeds: report.seeds.len(),
        total_dii: report.total_dii(),
        median_dii: median(&dii),
        median_dir: divergence_rate(report).median,
        median_vr: validation_rate(report).median,
        success_rate: success_rate(report),
        fdi: fdi(report, false),
        fdi_star: fdi(report, true),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Â12 of the first report's per-seed DiR over the second's.
    pub dir_effect: EffectSize,
    /// `None` when the reports do not cover the same seeds in the same order.
    pub dir_wilcoxon: Option<WilcoxonOutcome>,
}

/// Compares two sessions on per-seed DiR. The Wilcoxon test pairs seeds by
/// position and only runs when both reports list the same patches.
pub fn compare(a: &SessionReport, b: &SessionReport) -> Result<Comparison> {
    let da = divergence_rate(a).values;
    let db = divergence_rate(b).values;
    let dir_effect = vargha_delaney_a12(&da, &db)?;
    let paired = a.seeds.len() == b.seeds.len()
        && a.seeds
            .iter()
            .zip(&b.seeds)
            .all(|(x, y)| x.patch_indices == y.patch_indices);
    let dir_wilcoxon = if paired {
        let pairs: Vec<(f64, f64)> = da.iter().copied().zip(db.iter().copied()).collect();
        Some(wilcoxon_signed_rank(&pairs)?)
    } else {
        None
    };
    Ok(Comparison {
        dir_effect,
        dir_wilcoxon,
    })
}

fn opt(v: Option<f64>, unit: &str) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}{unit}"))
}

/// Medians per config, then one line per pair of configs.
pub fn summary_text(reports: &[(String, SessionReport)]) -> Result<String> {
    let mut out = String::new();
    for (name, r) in reports {
        let s = summarize(r);
        out.push_str(&format!(
            "{name}: seeds {}, DIIs {}, median #DII {}, median DiR {}, median VR {}, SR {:.2}%, FDI {}, FDI* {}{}\n",
            s.seeds,
            s.total_dii,
            opt(s.median_dii, ""),
            opt(s.median_dir, "%"),
            opt(s.median_vr, "%"),
            s.success_rate,
            opt(s.fdi, "s"),
            opt(s.fdi_star, "s"),
            if r.aborted.is_some() { " (aborted)" } else { "" },
        ));
    }
    if reports.len() > 1 {
        out.push_str("\npairwise (per-seed DiR):\n");
        for i in 0..reports.len() {
            for j in i + 1..reports.len() {
                let (na, ra) = &reports[i];
                let (nb, rb) = &reports[j];
                if ra.seeds.is_empty() || rb.seeds.is_empty() {
                    out.push_str(&format!("{na} vs {nb}: no seeds to compare\n"));
                    continue;
                }
                let c = compare(ra, rb)?;
                let test = match c.dir_wilcoxon {
                    None => "Wilcoxon skipped (seeds differ)".to_string(),
                    Some(WilcoxonOutcome::Degenerate) => {
                        "Wilcoxon skipped (all differences zero)".to_string()
                    }
                    Some(WilcoxonOutcome::Computed {
                        p_value, n, exact, ..
                    }) => format!(
                        "Wilcoxon p {p_value:.6} (n={n}, {})",
                        if exact { "exact" } else { "normal approx." }
                    ),
                };
                out.push_str(&format!(
                    "{na} vs {nb}: A12 {:.4} ({}), {test}\n",
                    c.dir_effect.a12, c.dir_effect.magnitude
                ));
            }
        }
    }
    Ok(out)
}
