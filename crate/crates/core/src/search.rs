//! Population search over transformation vectors: PSO, GA and a random
//! sampler, plus the DII tracker and the session loop that ties them to the
//! fitness functions.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortion::{DistortionBounds, Family, Layout};
use crate::error::{Error, Result};
use crate::fitness::{evaluate, FitnessSettings, JaccardFormula, Objective, SeedPatch, Subjects};
use crate::metrics::{SeedRecord, SessionReport};
use crate::nn::{predict_label, ModelSpec, NeuronIntervals};
use crate::patch::{PatchSet, DEFAULT_PSNR_THRESHOLD};
use crate::quant::QuantizedModel;

pub const DEFAULT_POPULATION: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 25;
pub const DEFAULT_EARLY_STOP_WINDOW: usize = 5;
pub const EARLY_STOP_TOLERANCE: f64 = 1e-9;
/// 10 MiB.
pub const DEFAULT_OFFLOAD_THRESHOLD: usize = 10 * 1024 * 1024;
pub const DII_MAGIC: &[u8; 8] = b"DVGDIIV1";
/// Charge per fitness evaluation under [`Timing::Virtual`].
pub const VIRTUAL_SECONDS_PER_EVAL: f64 = 1e-3;

pub type Bounds = [(f64, f64)];

fn check_bounds(bounds: &Bounds) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::Bounds("search space has no dimensions".into()));
    }
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Bounds(format!(
                "component {i}: bad range [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

fn uniform_vector<R: Rng + ?Sized>(bounds: &Bounds, rng: &mut R) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        })
        .collect()
}

fn clamp_into(x: &mut [f64], bounds: &Bounds) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
    }
}

fn check_fitness(fitness: &[f64], p: usize) -> Result<()> {
    if fitness.len() != p {
        return Err(Error::Argument(format!(
            "{} fitness values for {p} candidates",
            fitness.len()
        )));
    }
    if let Some(i) = fitness.iter().position(|f| f.is_nan()) {
        return Err(Error::Argument(format!("fitness of candidate {i} is NaN")));
    }
    Ok(())
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsoConfig {
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Per-component speed limit as a fraction of the component's range.
    pub velocity_clamp: f64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            inertia: 0.7,
            cognitive: 1.5,
            social: 1.5,
            velocity_clamp: 0.2,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.inertia) {
            return Err(Error::Config(format!(
                "pso.inertia must be in [0, 1], got {}",
                self.inertia
            )));
        }
        // zero is allowed so the update terms can be switched off one by one
        for (name, v) in [("cognitive", self.cognitive), ("social", self.social)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "pso.{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.velocity_clamp > 0.0 && self.velocity_clamp <= 1.0) {
            return Err(Error::Config(format!(
                "pso.velocity_clamp must be in (0, 1], got {}",
                self.velocity_clamp
            )));
        }
        Ok(())
    }
}

/// Global-best particle swarm, maximizing fitness.
#[derive(Debug, Clone)]
pub struct Pso {
    config: PsoConfig,
    bounds: Vec<(f64, f64)>,
    positions: Vec<Vec<f64>>,
    velocities: Vec<Vec<f64>>,
    personal_best: Vec<(Vec<f64>, f64)>,
    global_best: Option<(Vec<f64>, f64)>,
    rng: ChaCha8Rng,
}

impl Pso {
    pub fn new(config: PsoConfig, bounds: &Bounds, p: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        check_bounds(bounds)?;
        if p == 0 {
            return Err(Error::Config("population must not be empty".into()));
        }
        let positions: Vec<_> = (0..p).map(|_| uniform_vector(bounds, &mut rng)).collect();
        let vmax = Self::vmax_of(&config, bounds);
        let velocities = (0..p)
            .map(|_| {
                vmax.iter()
                    .map(|&m| {
                        if m > 0.0 {
                            rng.random_range(-m..=m)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self::from_parts(config, bounds, positions, velocities, rng)
    }

    /// Swarm with explicit positions and velocities; positions are clamped.
    pub fn from_parts(
        config: PsoConfig,
        bounds: &Bounds,
        mut positions: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        check_bounds(bounds)?;
        if positions.is_empty() || positions.len() != velocities.len() {
            return Err(Error::Argument("need one velocity per particle".into()));
        }
        if positions
            .iter()
            .chain(&velocities)
            .any(|v| v.len() != bounds.len())
        {
            return Err(Error::Argument(
                "particle dimension does not match bounds".into(),
            ));
        }
        for x in &mut positions {
            clamp_into(x, bounds);
        }
        Ok(Self {
            config,
            bounds: bounds.to_vec(),
            personal_best: positions
                .iter()
                .map(|x| (x.clone(), f64::NEG_INFINITY))
                .collect(),
            positions,
            velocities,
            global_best: None,
            rng,
        })
    }

    fn vmax_of(config: &PsoConfig, bounds: &Bounds) -> Vec<f64> {
        bounds
            .iter()
            .map(|(lo, hi)| config.velocity_clamp * (hi - lo))
            .collect()
    }

    pub fn population(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn global_best(&self) -> Option<(&[f64], f64)> {
        self.global_best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    /// Records `fitness` for the current positions, then moves every particle.
    pub fn step(&mut self, fitness: &[f64]) -> Result<()> {
        check_fitness(fitness, self.positions.len())?;
        for (i, &f) in fitness.iter().enumerate() {
            if f > self.personal_best[i].1 {
                self.personal_best[i] = (self.positions[i].clone(), f);
            }
        }
        let best = argmax(fitness);
        if self
            .global_best
            .as_ref()
            .is_none_or(|(_, g)| fitness[best] > *g)
        {
            self.global_best = Some((self.positions[best].clone(), fitness[best]));
        }
        let (gbest, _) = self.global_best.as_ref().expect("set above");
        let vmax = Self::vmax_of(&self.config, &self.bounds);
        let PsoConfig {
            inertia: w,
            cognitive: c1,
            social: c2,
            ..
        } = self.config;
        for ((x, v), (pbest, _)) in self
            .positions
            .iter_mut()
            .zip(&mut self.velocities)
            .zip(&self.personal_best)
        {
            for d in 0..x.len() {
                // (0, 1], so a non-zero pull always moves the particle
                let r1 = 1.0 - self.rng.random::<f64>();
                let r2 = 1.0 - self.rng.random::<f64>();
                let nv = w * v[d] + c1 * r1 * (pbest[d] - x[d]) + c2 * r2 * (gbest[d] - x[d]);
                v[d] = nv.clamp(-vmax[d], vmax[d]);
                x[d] += v[d];
            }
            clamp_into(x, &self.bounds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of the component's range.
    pub mutation_scale: f64,
    pub tournament_size: usize,
    pub elitism: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_scale: 0.1,
            tournament_size: 3,
            elitism: 1,
        }
    }
}

impl GaConfig {
    pub fn validate(&self, population: usize) -> Result<()> {
        for (name, v) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "ga.{name} must be in [0, 1], got {v}"
                )));
            }
        }
        if !(self.mutation_scale.is_finite() && self.mutation_scale >= 0.0) {
            return Err(Error::Config(format!(
                "ga.mutation_scale must be non-negative, got {}",
                self.mutation_scale
            )));
        }
        if self.tournament_size < 2 {
            return Err(Error::Config(format!(
                "ga.tournament_size must be at least 2, got {}",
                self.tournament_size
            )));
        }
        if self.elitism > population {
            return Err(Error::Config(format!(
                "ga.elitism {} exceeds the population {population}",
                self.elitism
            )));
        }
        Ok(())
    }
}

/// Generational GA: elites, tournament selection, uniform crossover,
/// Gaussian mutation.
#[derive(Debug, Clone)]
pub struct Ga {
    config: GaConfig,
    bounds: Vec<(f64, f64)>,
    population: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Ga {
    pub fn new(config: GaConfig, bounds: &Bounds, p: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        check_bounds(bounds)?;
        let population = (0..p).map(|_| uniform_vector(bounds, &mut rng)).collect();
        Self::from_population(config, bounds, population, rng)
    }

    pub fn from_population(
        config: GaConfig,
        bounds: &Bounds,
        mut population: Vec<Vec<f64>>,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        check_bounds(bounds)?;
        if population.is_empty() {
            return Err(Error::Config("population must not be empty".into()));
        }
        config.validate(population.len())?;
        if population.iter().any(|v| v.len() != bounds.len()) {
            return Err(Error::Argument(
                "individual dimension does not match bounds".into(),
            ));
        }
        for x in &mut population {
            clamp_into(x, bounds);
        }
        Ok(Self {
            config,
            bounds: bounds.to_vec(),
            population,
            rng,
        })
    }

    pub fn population(&self) -> &[Vec<f64>] {
        &self.population
    }

    fn tournament(&mut self, fitness: &[f64]) -> usize {
        let p = fitness.len();
        let k = self.config.tournament_size;
        let entrants: Vec<usize> = if k <= p {
            rand::seq::index::sample(&mut self.rng, p, k).into_vec()
        } else {
            (0..k).map(|_| self.rng.random_range(0..p)).collect()
        };
        entrants
            .into_iter()
            .reduce(|a, b| {
                if fitness[b] > fitness[a] || (fitness[b] == fitness[a] && b < a) {
                    b
                } else {
                    a
                }
            })
            .expect("tournament has entrants")
    }

    fn mutate(&mut self, x: &mut [f64]) {
        let cfg = self.config;
        for (v, &(lo, hi)) in x.iter_mut().zip(&self.bounds) {
            if self.rng.random_bool(cfg.mutation_rate) {
                let std = cfg.mutation_scale * (hi - lo);
                if std > 0.0 {
                    *v += Normal::new(0.0, std)
                        .expect("finite std")
                        .sample(&mut self.rng);
                }
            }
        }
        clamp_into(x, &self.bounds);
    }

    pub fn step(&mut self, fitness: &[f64]) -> Result<()> {
        let p = self.population.len();
        check_fitness(fitness, p)?;
        let mut order: Vec<usize> = (0..p).collect();
        // stable sort keeps the lower index first among equals
        order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]));
        let mut elites: Vec<usize> = order[..self.config.elitism].to_vec();
        elites.sort_unstable();
        let mut next: Vec<Vec<f64>> = elites.iter().map(|&i| self.population[i].clone()).collect();
        while next.len() < p {
            let a = self.tournament(fitness);
            let b = self.tournament(fitness);
            let mut c1 = self.population[a].clone();
            let mut c2 = self.population[b].clone();
            for d in 0..c1.len() {
                if self.rng.random_bool(self.config.crossover_rate * 0.5) {
                    std::mem::swap(&mut c1[d], &mut c2[d]);
                }
            }
            self.mutate(&mut c1);
            self.mutate(&mut c2);
            next.push(c1);
            if next.len() < p {
                next.push(c2);
            }
        }
        self.population = next;
        Ok(())
    }
}

/// Fresh uniform samples every generation; the baseline.
#[derive(Debug, Clone)]
pub struct RandomSampler {
    bounds: Vec<(f64, f64)>,
    population: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl RandomSampler {
    pub fn new(bounds: &Bounds, p: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        check_bounds(bounds)?;
        if p == 0 {
            return Err(Error::Config("population must not be empty".into()));
        }
        let population = (0..p).map(|_| uniform_vector(bounds, &mut rng)).collect();
        Ok(Self {
            bounds: bounds.to_vec(),
            population,
            rng,
        })
    }

    pub fn population(&self) -> &[Vec<f64>] {
        &self.population
    }

    pub fn step(&mut self) {
        for x in &mut self.population {
            *x = uniform_vector(&self.bounds, &mut self.rng);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Pso,
    Ga,
    Random,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Pso => "pso",
            OptimizerKind::Ga => "ga",
            OptimizerKind::Random => "random",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Driver {
    Pso(Pso),
    Ga(Ga),
    Random(RandomSampler),
}

impl Driver {
    pub fn new(
        kind: OptimizerKind,
        pso: PsoConfig,
        ga: GaConfig,
        bounds: &Bounds,
        p: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Pso => Driver::Pso(Pso::new(pso, bounds, p, rng)?),
            OptimizerKind::Ga => Driver::Ga(Ga::new(ga, bounds, p, rng)?),
            OptimizerKind::Random => Driver::Random(RandomSampler::new(bounds, p, rng)?),
        })
    }

    pub fn population(&self) -> &[Vec<f64>] {
        match self {
            Driver::Pso(s) => s.population(),
            Driver::Ga(s) => s.population(),
            Driver::Random(s) => s.population(),
        }
    }

    pub fn step(&mut self, fitness: &[f64]) -> Result<()> {
        match self {
            Driver::Pso(s) => s.step(fitness),
            Driver::Ga(s) => s.step(fitness),
            Driver::Random(s) => {
                check_fitness(fitness, s.population.len())?;
                s.step();
                Ok(())
            }
        }
    }
}

/// True when the last `window` generations changed neither the best fitness
/// (within [`EARLY_STOP_TOLERANCE`]) nor the DII count. `history` holds one
/// `(best fitness, DIIs so far)` entry per generation; a zero window never
/// stops.
pub fn early_stop(history: &[(f64, u64)], window: usize) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let tail = &history[history.len() - window - 1..];
    let (f0, d0) = tail[0];
    tail.iter()
        .all(|&(f, d)| (f - f0).abs() <= EARLY_STOP_TOLERANCE && d == d0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiiRecord {
    pub rng_seed: u64,
    pub patch_index: u32,
    pub vector: Vec<f32>,
    /// Ground-truth label of the originating patch.
    pub true_label: u32,
    pub original_label: u32,
    pub quantized_label: u32,
}

impl DiiRecord {
    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(self.vector.len())
    }

    pub fn encoded_len_for(vector_len: usize) -> usize {
        8 + 4 + 4 + 4 * vector_len + 12
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.patch_index.to_le_bytes());
        out.extend_from_slice(&(self.vector.len() as u32).to_le_bytes());
        for v in &self.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in [self.true_label, self.original_label, self.quantized_label] {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }

    /// The vector widened back to f64 for decoding.
    pub fn vector_f64(&self) -> Vec<f64> {
        self.vector.iter().map(|&v| v as f64).collect()
    }
}

/// Parses an offload file.
pub fn read_dii_bytes(bytes: &[u8]) -> Result<Vec<DiiRecord>> {
    if bytes.len() < DII_MAGIC.len() || &bytes[..DII_MAGIC.len()] != DII_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing DII file magic".into(),
        });
    }
    let mut at = DII_MAGIC.len();
    let mut records = Vec::new();
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let end = *at + n;
        if end > bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: bytes.len() as u64,
            });
        }
        let s = &bytes[*at..end];
        *at = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    while at < bytes.len() {
        let rng_seed = u64::from_le_bytes(take(&mut at, 8)?.try_into().expect("8 bytes"));
        let patch_index = u32_at(take(&mut at, 4)?);
        let len_at = at;
        let len = u32_at(take(&mut at, 4)?) as usize;
        if len > (bytes.len() - at) / 4 {
            return Err(Error::Format {
                offset: len_at as u64,
                message: format!("vector length {len} runs past the end of the file"),
            });
        }
        let vector = take(&mut at, 4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = take(&mut at, 12)?;
        records.push(DiiRecord {
            rng_seed,
            patch_index,
            vector,
            true_label: u32_at(&labels[0..4]),
            original_label: u32_at(&labels[4..8]),
            quantized_label: u32_at(&labels[8..12]),
        });
    }
    Ok(records)
}

pub fn read_dii_file(path: impl AsRef<Path>) -> Result<Vec<DiiRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dii_bytes(&bytes)
}

#[derive(Debug)]
enum Sink {
    File { path: PathBuf, started: bool },
    Memory(Vec<DiiRecord>),
}

/// Collects DIIs in a bounded buffer and offloads it when the next record
/// would not fit.
#[derive(Debug)]
pub struct DiiTracker {
    threshold: usize,
    sink: Sink,
    buffer: Vec<DiiRecord>,
    buffered_bytes: usize,
    appended: u64,
    flush_points: Vec<u64>,
    generated: u64,
    valid: u64,
}

impl DiiTracker {
    /// Offloads to `path`, which is created (truncated) on the first flush.
    pub fn to_file(path: impl Into<PathBuf>, threshold: usize) -> Self {
        Self::with_sink(
            Sink::File {
                path: path.into(),
                started: false,
            },
            threshold,
        )
    }

    /// Offloads into memory; same buffering rules, no I/O.
    pub fn in_memory(threshold: usize) -> Self {
        Self::with_sink(Sink::Memory(Vec::new()), threshold)
    }

    fn with_sink(sink: Sink, threshold: usize) -> Self {
        Self {
            threshold,
            sink,
            buffer: Vec::new(),
            buffered_bytes: 0,
            appended: 0,
            flush_points: Vec::new(),
            generated: 0,
            valid: 0,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    pub fn dii_count(&self) -> u64 {
        self.appended
    }

    pub fn generated(&self) -> u64 {
        self.generated
    }

    pub fn valid(&self) -> u64 {
        self.valid
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffered_bytes
    }

    /// 0-based indices of the appends that triggered a flush before storing
    /// their record.
    pub fn flush_points(&self) -> &[u64] {
        &self.flush_points
    }

    pub fn note_candidate(&mut self, valid: bool) {
        self.generated += 1;
        self.valid += valid as u64;
    }

    pub fn track(&mut self, record: DiiRecord) -> Result<()> {
        let size = record.encoded_len();
        let index = self.appended;
        if !self.buffer.is_empty() && self.buffered_bytes + size > self.threshold {
            self.flush_points.push(index);
            self.flush()?;
        }
        self.appended += 1;
        if size > self.threshold {
            // would never fit: goes straight out
            return self.write_out(vec![record]);
        }
        self.buffered_bytes += size;
        self.buffer.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let records = std::mem::take(&mut self.buffer);
        self.buffered_bytes = 0;
        self.write_out(records)
    }

    fn write_out(&mut self, records: Vec<DiiRecord>) -> Result<()> {
        match &mut self.sink {
            Sink::Memory(all) => {
                all.extend(records);
                Ok(())
            }
            Sink::File { path, started } => {
                let mut bytes = Vec::new();
                if !*started {
                    bytes.extend_from_slice(DII_MAGIC);
                }
                for r in &records {
                    r.encode_into(&mut bytes);
                }
                let mut file = if *started {
                    OpenOptions::new().append(true).open(&*path)
                } else {
                    File::create(&*path)
                }
                .map_err(|e| Error::io(path.as_path(), e))?;
                file.write_all(&bytes)
                    .map_err(|e| Error::io(path.as_path(), e))?;
                *started = true;
                Ok(())
            }
        }
    }

    /// Records offloaded so far (memory sink only) followed by the resident
    /// buffer.
    pub fn records_in_memory(&self) -> Option<Vec<DiiRecord>> {
        match &self.sink {
            Sink::Memory(all) => Some(all.iter().chain(&self.buffer).cloned().collect()),
            Sink::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitnessMode {
    #[default]
    Single,
    /// Patches per batch.
    Batch(usize),
}

/// How per-seed durations are measured. `Virtual` charges a fixed cost per
/// fitness evaluation, which makes reports reproducible byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    #[default]
    Wall,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub objective: Objective,
    pub optimizer: OptimizerKind,
    pub mode: FitnessMode,
    pub population: usize,
    pub max_iter: usize,
    pub psnr_threshold: f64,
    /// Generations without change before stopping; 0 disables.
    pub early_stop_window: usize,
    pub seed: u64,
    /// Run at most this many seeds (patches, or batches in batch mode).
    pub max_seeds: Option<usize>,
    pub jaccard: JaccardFormula,
    pub timing: Timing,
    pub offload_threshold: usize,
    pub families: Vec<Family>,
    pub pso: PsoConfig,
    pub ga: GaConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Div,
            optimizer: OptimizerKind::Pso,
            mode: FitnessMode::Single,
            population: DEFAULT_POPULATION,
            max_iter: DEFAULT_MAX_ITER,
            psnr_threshold: DEFAULT_PSNR_THRESHOLD,
            early_stop_window: DEFAULT_EARLY_STOP_WINDOW,
            seed: 0,
            max_seeds: None,
            jaccard: JaccardFormula::Additive,
            timing: Timing::Wall,
            offload_threshold: DEFAULT_OFFLOAD_THRESHOLD,
            families: Family::ALL.to_vec(),
            pso: PsoConfig::default(),
            ga: GaConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let min_p = if self.optimizer == OptimizerKind::Random {
            1
        } else {
            2
        };
        if self.population < min_p {
            return Err(Error::Config(format!(
                "population must be at least {min_p} for {}, got {}",
                self.optimizer, self.population
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.psnr_threshold.is_finite() && self.psnr_threshold > 0.0) {
            return Err(Error::Config(format!(
                "psnr_threshold must be positive, got {}",
                self.psnr_threshold
            )));
        }
        if self.mode == FitnessMode::Batch(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_seeds == Some(0) {
            return Err(Error::Config(
                "max_seeds must be at least 1 when set".into(),
            ));
        }
        if self.families.is_empty() {
            return Err(Error::Config("families must not be empty".into()));
        }
        let mut seen = self.families.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.families.len() {
            return Err(Error::Config("families lists a family twice".into()));
        }
        self.pso.validate()?;
        self.ga.validate(self.population)?;
        Ok(())
    }

    fn fitness_settings(&self) -> FitnessSettings {
        FitnessSettings {
            objective: self.objective,
            jaccard: self.jaccard,
            psnr_threshold: self.psnr_threshold,
        }
    }
}

/// Seed for the stochastic distortions of one candidate. It depends only on
/// the session seed and the vector as stored (binary32), so re-evaluating a
/// vector, here or from a DII file, draws the same noise.
pub fn candidate_seed(session_seed: u64, vector: &[f32]) -> u64 {
    let mut h = Sha256::new();
    h.update(session_seed.to_le_bytes());
    for v in vector {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Indices of labelled patches the original model gets right.
pub fn eligible_seeds(patches: &PatchSet, subjects: &Subjects) -> Result<Vec<(u32, usize)>> {
    let predictions = patches
        .patches
        .par_iter()
        .map(|p| predict_label(&subjects.original.forward(p)?.logits))
        .collect::<Result<Vec<_>>>()?;
    Ok(patches
        .patches
        .iter()
        .zip(predictions)
        .enumerate()
        .filter(|(_, (p, pred))| p.label() == Some(*pred as u32))
        .map(|(i, (_, pred))| (i as u32, pred))
        .collect())
}

struct Clock {
    timing: Timing,
    start: Option<Instant>,
    evaluations: u64,
}

impl Clock {
    fn new(timing: Timing) -> Self {
        Self {
            timing,
            start: None,
            evaluations: 0,
        }
    }

    fn start(&mut self) {
        self.start.get_or_insert_with(Instant::now);
    }

    fn seconds(&self) -> f64 {
        match self.timing {
            Timing::Wall => self.start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
            Timing::Virtual => self.evaluations as f64 * VIRTUAL_SECONDS_PER_EVAL,
        }
    }
}

/// Runs the search for every eligible seed. Configuration and subject
/// mismatches fail before any evaluation. A failing offload stops the session
/// and returns the report so far with `aborted` set.
pub fn run_session(
    config: &SessionConfig,
    patches: &PatchSet,
    model: &ModelSpec,
    qmodel: &QuantizedModel,
    intervals: Option<NeuronIntervals>,
    bounds: &DistortionBounds,
    tracker: &mut DiiTracker,
) -> Result<SessionReport> {
    config.validate()?;
    bounds.validate()?;
    let Some(dims) = patches.dims() else {
        return Err(Error::Config("patch set is empty".into()));
    };
    if model.input_dims != dims {
        return Err(Error::Config(format!(
            "patches are {dims}, model expects {}",
            model.input_dims
        )));
    }
    if qmodel.source_model_hash != model.digest() {
        return Err(Error::Config(
            "quantized model was not derived from this model".into(),
        ));
    }
    if config.objective == Objective::Cov && intervals.is_none() {
        return Err(Error::Config(
            "coverage objective needs neuron intervals".into(),
        ));
    }
    let subjects = Subjects::new(model.compile()?, qmodel.compile()?, intervals)?;
    let layout = Layout::with_families(dims, bounds, &config.families)?;
    let space = layout.bounds();
    let settings = config.fitness_settings();

    let eligible = eligible_seeds(patches, &subjects)?;
    let unit_size = match config.mode {
        FitnessMode::Single => 1,
        FitnessMode::Batch(b) => b,
    };
    let mut units: Vec<&[(u32, usize)]> = eligible.chunks(unit_size).collect();
    if let Some(limit) = config.max_seeds {
        units.truncate(limit);
    }

    let mut report = SessionReport {
        config: serde_json::to_value(config)?,
        model_hash: model.digest(),
        quantized_model_hash: qmodel.digest(),
        seeds: Vec::new(),
        aborted: None,
    };

    for (unit, members) in units.into_iter().enumerate() {
        let batch: Vec<SeedPatch<'_>> = members
            .iter()
            .map(|&(index, pred)| SeedPatch {
                index,
                patch: &patches.patches[index as usize],
                original_prediction: pred,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(unit as u64);
        let mut driver = Driver::new(
            config.optimizer,
            config.pso,
            config.ga,
            &space,
            config.population,
            rng,
        )?;
        let mut clock = Clock::new(config.timing);
        let mut record = SeedRecord {
            seed: unit,
            patch_indices: members.iter().map(|m| m.0).collect(),
            generations: 0,
            generated: 0,
            valid: 0,
            dii: 0,
            best_fitness: Vec::new(),
            fdi_seconds: None,
            wall_seconds: 0.0,
        };
        let mut history = Vec::new();
        let mut failure = None;

        for generation in 0..config.max_iter {
            let stored: Vec<Vec<f32>> = driver
                .population()
                .iter()
                .map(|x| x.iter().map(|&v| v as f32).collect())
                .collect();
            clock.start();
            let evaluations = stored
                .par_iter()
                .map(|v| {
                    let widened: Vec<f64> = v.iter().map(|&c| c as f64).collect();
                    let seed = candidate_seed(config.seed, v);
                    evaluate(&layout, &widened, seed, &subjects, &settings, &batch)
                        .map(|e| (seed, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut fitness = Vec::with_capacity(evaluations.len());
            for ((seed, eval), v) in evaluations.into_iter().zip(&stored) {
                clock.evaluations += 1;
                fitness.push(eval.fitness);
                for d in &eval.details {
                    record.generated += 1;
                    tracker.note_candidate(d.valid);
                    if d.valid {
                        record.valid += 1;
                    }
                    if !d.dii {
                        continue;
                    }
                    record.dii += 1;
                    record.fdi_seconds.get_or_insert_with(|| clock.seconds());
                    let item = batch
                        .iter()
                        .find(|b| b.index == d.patch_index)
                        .expect("member");
                    let dii = DiiRecord {
                        rng_seed: seed,
                        patch_index: d.patch_index,
                        vector: v.clone(),
                        true_label: item.patch.label().expect("eligible seeds are labelled"),
                        original_label: d.original_label as u32,
                        quantized_label: d.quantized_label as u32,
                    };
                    if let Err(e) = tracker.track(dii) {
                        failure.get_or_insert(e);
                    }
                }
            }
            record.generations = generation + 1;
            let best = fitness[argmax(&fitness)];
            record.best_fitness.push(best);
            history.push((best, record.dii));
            if failure.is_some() || early_stop(&history, config.early_stop_window) {
                break;
            }
            if generation + 1 < config.max_iter {
                driver.step(&fitness)?;
            }
        }
        record.wall_seconds = clock.seconds();
        report.seeds.push(record);
        if let Some(e) = failure {
            report.aborted = Some(e.to_string());
            return Ok(report);
        }
    }
    if let Err(e) = tracker.flush() {
        report.aborted = Some(e.to_string());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    fn record(len: usize, i: u32) -> DiiRecord {
        DiiRecord {
            rng_seed: 0xDEAD_BEEF + i as u64,
            patch_index: i,
            vector: (0..len).map(|k| k as f32 * 0.25 + i as f32).collect(),
            true_label: 1,
            original_label: 1,
            quantized_label: 0,
        }
    }

    #[test]
    fn pso_fixed_point() {
        let bounds = vec![(-1.0, 1.0); 3];
        let x = vec![vec![0.2, -0.3, 0.4]; 4];
        let mut pso = Pso::from_parts(
            PsoConfig::default(),
            &bounds,
            x.clone(),
            vec![vec![0.0; 3]; 4],
            rng(1),
        )
        .unwrap();
        pso.step(&[1.0; 4]).unwrap();
        assert_eq!(pso.population(), &x[..]);
    }

    #[test]
    fn pso_social_only_moves_toward_gbest() {
        let cfg = PsoConfig {
            inertia: 0.0,
            cognitive: 0.0,
            social: 1.0,
            velocity_clamp: 1.0,
        };
        let bounds = vec![(-10.0, 10.0); 2];
        let x = vec![vec![0.0, 0.0], vec![4.0, -4.0], vec![-3.0, 5.0]];
        let mut pso =
            Pso::from_parts(cfg, &bounds, x.clone(), vec![vec![0.0; 2]; 3], rng(2)).unwrap();
        pso.step(&[1.0, 0.0, -1.0]).unwrap();
        let g = &x[0];
        for (before, after) in x.iter().zip(pso.population()).skip(1) {
            for d in 0..2 {
                assert!((after[d] - g[d]).abs() < (before[d] - g[d]).abs());
                assert!((after[d] - before[d]).signum() == (g[d] - before[d]).signum());
            }
        }
    }

    #[test]
    fn pso_gbest_monotone_on_sphere() {
        let bounds = vec![(-5.0, 5.0); 4];
        let mut pso = Pso::new(PsoConfig::default(), &bounds, 10, rng(3)).unwrap();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..50 {
            let f: Vec<f64> = pso.population().iter().map(|x| sphere(x)).collect();
            pso.step(&f).unwrap();
            let g = pso.global_best().unwrap().1;
            assert!(g >= last);
            last = g;
        }
        assert!(last > -0.5);
    }

    #[test]
    fn ga_identity_configuration() {
        let cfg = GaConfig {
            crossover_rate: 0.0,
            mutation_rate: 0.0,
            elitism: 5,
            ..GaConfig::default()
        };
        let bounds = vec![(0.0, 1.0); 3];
        let mut ga = Ga::new(cfg, &bounds, 5, rng(4)).unwrap();
        let before = ga.population().to_vec();
        ga.step(&[0.3, 0.1, 0.9, 0.2, 0.5]).unwrap();
        assert_eq!(ga.population(), &before[..]);
    }

    #[test]
    fn ga_elitism_keeps_best() {
        let bounds = vec![(-5.0, 5.0); 4];
        let mut ga = Ga::new(GaConfig::default(), &bounds, 10, rng(5)).unwrap();
        let mut last = f64::NEG_INFINITY;
        for _ in 0..50 {
            let f: Vec<f64> = ga.population().iter().map(|x| sphere(x)).collect();
            let best = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= last);
            last = best;
            ga.step(&f).unwrap();
        }
    }

    #[test]
    fn ga_rejects_bad_config() {
        let bad = GaConfig {
            tournament_size: 1,
            ..GaConfig::default()
        };
        assert!(bad.validate(10).is_err());
        let bad = GaConfig {
            elitism: 11,
            ..GaConfig::default()
        };
        assert!(bad.validate(10).is_err());
    }

    #[test]
    fn random_sampler_is_reproducible() {
        let bounds = vec![(0.0, 2.0), (-1.0, 1.0)];
        let mut a = RandomSampler::new(&bounds, 4, rng(6)).unwrap();
        let mut b = RandomSampler::new(&bounds, 4, rng(6)).unwrap();
        let first = a.population().to_vec();
        a.step();
        b.step();
        assert_eq!(a.population(), b.population());
        assert_ne!(a.population(), &first[..]);
    }

    #[test]
    fn early_stop_rules() {
        let improving: Vec<_> = (0..10).map(|i| (i as f64, 0)).collect();
        assert!(!early_stop(&improving, 5));
        let growing: Vec<_> = (0..10).map(|i| (1.0, i)).collect();
        assert!(!early_stop(&growing, 5));
        let flat = vec![(1.0, 3); 6];
        assert!(early_stop(&flat, 5));
        assert!(!early_stop(&flat[..5], 5));
        assert!(!early_stop(&flat, 0));
        let jitter = vec![
            (1.0, 3),
            (1.0 + 1e-12, 3),
            (1.0, 3),
            (1.0, 3),
            (1.0, 3),
            (1.0, 3),
        ];
        assert!(early_stop(&jitter, 5));
    }

    #[test]
    fn record_size_matches_layout() {
        assert_eq!(DiiRecord::encoded_len_for(8), 60);
        let mut buf = Vec::new();
        record(8, 0).encode_into(&mut buf);
        assert_eq!(buf.len(), 60);
    }

    #[test]
    fn tracker_flushes_before_overflow() {
        let mut t = DiiTracker::in_memory(100);
        for i in 0..5 {
            t.track(record(8, i)).unwrap();
            assert!(t.buffered_bytes() <= 100);
        }
        assert_eq!(t.flush_points(), &[1, 2, 3, 4]);
        let all = t.records_in_memory().unwrap();
        assert_eq!(all, (0..5).map(|i| record(8, i)).collect::<Vec<_>>());
    }

    #[test]
    fn tracker_file_roundtrip_and_no_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dii");
        let mut t = DiiTracker::to_file(&path, 100);
        t.flush().unwrap();
        assert!(!path.exists());
        let recs: Vec<_> = (0..4).map(|i| record(8, i)).collect();
        for r in &recs {
            t.track(r.clone()).unwrap();
        }
        t.flush().unwrap();
        assert_eq!(read_dii_file(&path).unwrap(), recs);
    }

    #[test]
    fn oversized_record_goes_straight_out() {
        let mut t = DiiTracker::in_memory(50);
        t.track(record(8, 0)).unwrap();
        assert_eq!(t.buffered_bytes(), 0);
        assert_eq!(t.records_in_memory().unwrap().len(), 1);
    }

    #[test]
    fn truncated_dii_file() {
        let mut bytes = DII_MAGIC.to_vec();
        record(3, 0).encode_into(&mut bytes);
        bytes.pop();
        assert!(read_dii_bytes(&bytes).is_err());
        assert!(read_dii_bytes(b"NOTMAGIC").is_err());
        assert_eq!(read_dii_bytes(DII_MAGIC).unwrap(), vec![]);
    }

    #[test]
    fn session_config_validation() {
        assert!(SessionConfig::default().validate().is_ok());
        let c = SessionConfig {
            population: 1,
            ..SessionConfig::default()
        };
        assert!(c.validate().is_err());
        let c = SessionConfig {
            population: 1,
            optimizer: OptimizerKind::Random,
            ga: GaConfig {
                elitism: 0,
                ..GaConfig::default()
            },
            ..SessionConfig::default()
        };
        assert!(c.validate().is_ok());
        let c = SessionConfig {
            max_iter: 0,
            ..SessionConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn candidate_seed_depends_on_both_inputs() {
        let v = [0.5f32, 1.0];
        assert_eq!(candidate_seed(1, &v), candidate_seed(1, &v));
        assert_ne!(candidate_seed(1, &v), candidate_seed(2, &v));
        assert_ne!(candidate_seed(1, &v), candidate_seed(1, &[0.5, 1.5]));
    }
}
