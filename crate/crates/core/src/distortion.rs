//! Hyperspectral patch distortions and the flat transformation-vector
//! encoding that the search operates on.
//!
//! A [`Layout`] stacks one [`DistortionSlot`] per family in registry order
//! (radiometric families first, geometric last). Every slot starts with an
//! activation switch; a slot is applied when its switch is `>= 0.5`.
//! Integer-valued components (coordinates, selectors, counts) are carried as
//! reals and decoded with `floor`, clamped to the last valid index, so a
//! uniform real draw over `[lo, hi]` is uniform over the integer choices.
//!
//! Stochastic sub-choices (which pixels, noise draws) come from a ChaCha8
//! stream keyed by the candidate seed and the slot index, so
//! `(vector, patch, seed)` reproduces a distorted patch bit for bit.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{psnr, Dims, Patch3D, PatchSet};

pub const SWITCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ContinuousDropout,
    DiscontinuousDropout,
    Stripping,
    BandLoss,
    SaltPepper,
    GaussianNoise,
    Rotation,
    Zoom,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::ContinuousDropout,
        Family::DiscontinuousDropout,
        Family::Stripping,
        Family::BandLoss,
        Family::SaltPepper,
        Family::GaussianNoise,
        Family::Rotation,
        Family::Zoom,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::ContinuousDropout => "continuous_dropout",
            Family::DiscontinuousDropout => "discontinuous_dropout",
            Family::Stripping => "stripping",
            Family::BandLoss => "band_loss",
            Family::SaltPepper => "salt_pepper",
            Family::GaussianNoise => "gaussian_noise",
            Family::Rotation => "rotation",
            Family::Zoom => "zoom",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown distortion family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Switch,
    Coordinate,
    Parameter,
    Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    pub kind: ComponentKind,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSlot {
    pub family: Family,
    pub offset: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// Moves both ends halfway toward `identity`.
    pub fn halved_toward(&self, identity: f64) -> Self {
        Self {
            lo: identity + (self.lo - identity) / 2.0,
            hi: identity + (self.hi - identity) / 2.0,
        }
    }
}

/// Parameter ranges of every family. Integer-valued ranges (region sides,
/// band counts) are half-open over the reals: `[1, 3)` means sides 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionBounds {
    pub continuous_region_height: ParamRange,
    pub continuous_region_width: ParamRange,
    pub discontinuous_region_height: ParamRange,
    pub discontinuous_region_width: ParamRange,
    pub drop_fraction: ParamRange,
    /// Stripe target mean, as an offset in units of the component std.
    pub strip_mean_offset: ParamRange,
    /// Stripe target std over the component std.
    pub strip_std_ratio: ParamRange,
    pub band_count: ParamRange,
    pub salt_pepper_density: ParamRange,
    /// Noise mean, as a fraction of the patch dynamic range.
    pub gaussian_mean: ParamRange,
    /// Noise std, as a fraction of the patch dynamic range.
    pub gaussian_sigma: ParamRange,
    pub gaussian_fraction: ParamRange,
    /// Degrees.
    pub rotation_angle: ParamRange,
    pub zoom_factor: ParamRange,
}

impl DistortionBounds {
    pub fn default_for(dims: Dims) -> Self {
        let side = |d: usize| ParamRange::new(1.0, (d / 3).max(1) as f64 + 1.0);
        Self {
            continuous_region_height: side(dims.rows),
            continuous_region_width: side(dims.cols),
            discontinuous_region_height: side(dims.rows),
            discontinuous_region_width: side(dims.cols),
            drop_fraction: ParamRange::new(0.01, 0.3),
            strip_mean_offset: ParamRange::new(-0.5, 0.5),
            strip_std_ratio: ParamRange::new(0.75, 1.25),
            band_count: ParamRange::new(1.0, (dims.bands / 10).max(1) as f64 + 1.0),
            salt_pepper_density: ParamRange::new(0.001, 0.05),
            gaussian_mean: ParamRange::new(-0.02, 0.02),
            gaussian_sigma: ParamRange::new(0.0, 0.05),
            gaussian_fraction: ParamRange::new(0.1, 1.0),
            rotation_angle: ParamRange::new(-45.0, 45.0),
            zoom_factor: ParamRange::new(0.8, 1.25),
        }
    }

    /// The tunable parameters of a family, each with its identity value.
    fn tunables(&mut self, family: Family) -> Vec<(&mut ParamRange, f64)> {
        match family {
            Family::ContinuousDropout => vec![
                (&mut self.continuous_region_height, 1.0),
                (&mut self.continuous_region_width, 1.0),
            ],
            Family::DiscontinuousDropout => vec![
                (&mut self.discontinuous_region_height, 1.0),
                (&mut self.discontinuous_region_width, 1.0),
                (&mut self.drop_fraction, 0.0),
            ],
            Family::Stripping => vec![
                (&mut self.strip_mean_offset, 0.0),
                (&mut self.strip_std_ratio, 1.0),
            ],
            Family::BandLoss => vec![(&mut self.band_count, 1.0)],
            Family::SaltPepper => vec![(&mut self.salt_pepper_density, 0.0)],
            Family::GaussianNoise => vec![
                (&mut self.gaussian_mean, 0.0),
                (&mut self.gaussian_sigma, 0.0),
                (&mut self.gaussian_fraction, 0.0),
            ],
            Family::Rotation => vec![(&mut self.rotation_angle, 0.0)],
            Family::Zoom => vec![(&mut self.zoom_factor, 1.0)],
        }
    }

    fn all(&self) -> [(&'static str, ParamRange); 14] {
        [
            ("continuous_region_height", self.continuous_region_height),
            ("continuous_region_width", self.continuous_region_width),
            (
                "discontinuous_region_height",
                self.discontinuous_region_height,
            ),
            (
                "discontinuous_region_width",
                self.discontinuous_region_width,
            ),
            ("drop_fraction", self.drop_fraction),
            ("strip_mean_offset", self.strip_mean_offset),
            ("strip_std_ratio", self.strip_std_ratio),
            ("band_count", self.band_count),
            ("salt_pepper_density", self.salt_pepper_density),
            ("gaussian_mean", self.gaussian_mean),
            ("gaussian_sigma", self.gaussian_sigma),
            ("gaussian_fraction", self.gaussian_fraction),
            ("rotation_angle", self.rotation_angle),
            ("zoom_factor", self.zoom_factor),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.all() {
            if !(r.lo < r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::Config(format!(
                    "bounds.{name}: need finite lo < hi, got [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        let non_negative = [
            ("drop_fraction", self.drop_fraction),
            ("salt_pepper_density", self.salt_pepper_density),
            ("gaussian_sigma", self.gaussian_sigma),
            ("gaussian_fraction", self.gaussian_fraction),
            ("strip_std_ratio", self.strip_std_ratio),
            ("zoom_factor", self.zoom_factor),
        ];
        for (name, r) in non_negative {
            if r.lo < 0.0 {
                return Err(Error::Config(format!(
                    "bounds.{name}: lower bound must be >= 0"
                )));
            }
        }
        if self.zoom_factor.lo <= 0.0 {
            return Err(Error::Config(
                "bounds.zoom_factor: lower bound must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: DistortionBounds = serde_json::from_str(&text)?;
        b.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Slot registry for one patch geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dims: Dims,
    pub slots: Vec<DistortionSlot>,
    pub len: usize,
}

fn comp(name: &str, kind: ComponentKind, lo: f64, hi: f64) -> ComponentSpec {
    ComponentSpec {
        name: name.into(),
        kind,
        lo,
        hi,
    }
}

fn slot_components(family: Family, dims: Dims, b: &DistortionBounds) -> Vec<ComponentSpec> {
    use ComponentKind::*;
    let switch = comp("switch", Switch, 0.0, 1.0);
    let rows = dims.rows as f64;
    let cols = dims.cols as f64;
    let p = |name: &str, r: ParamRange| comp(name, Parameter, r.lo, r.hi);
    match family {
        Family::ContinuousDropout => vec![
            switch,
            comp("variant", Selector, 0.0, 3.0),
            comp("row", Coordinate, 0.0, rows),
            comp("col", Coordinate, 0.0, cols),
            p("region_height", b.continuous_region_height),
            p("region_width", b.continuous_region_width),
            comp("fill", Selector, 0.0, 2.0),
        ],
        Family::DiscontinuousDropout => vec![
            switch,
            comp("variant", Selector, 0.0, 3.0),
            comp("row", Coordinate, 0.0, rows),
            comp("col", Coordinate, 0.0, cols),
            p("region_height", b.discontinuous_region_height),
            p("region_width", b.discontinuous_region_width),
            comp("fill", Selector, 0.0, 2.0),
            p("drop_fraction", b.drop_fraction),
        ],
        Family::Stripping => vec![
            switch,
            comp("variant", Selector, 0.0, 2.0),
            comp("row", Coordinate, 0.0, rows),
            comp("col", Coordinate, 0.0, cols),
            p("mean_offset", b.strip_mean_offset),
            p("std_ratio", b.strip_std_ratio),
        ],
        Family::BandLoss => vec![
            switch,
            comp(
                "start_band",
                Coordinate,
                1.0,
                (dims.bands.max(3) - 1) as f64,
            ),
            p("band_count", b.band_count),
        ],
        Family::SaltPepper => vec![switch, p("density", b.salt_pepper_density)],
        Family::GaussianNoise => vec![
            switch,
            comp("axis", Selector, 0.0, 2.0),
            p("mean", b.gaussian_mean),
            p("sigma", b.gaussian_sigma),
            p("fraction", b.gaussian_fraction),
        ],
        Family::Rotation => vec![switch, p("rotation_angle", b.rotation_angle)],
        Family::Zoom => vec![switch, p("zoom_factor", b.zoom_factor)],
    }
}

impl Layout {
    pub fn new(dims: Dims, bounds: &DistortionBounds) -> Result<Self> {
        Self::with_families(dims, bounds, &Family::ALL)
    }

    /// Registry restricted to `families` (kept in registry order).
    pub fn with_families(
        dims: Dims,
        bounds: &DistortionBounds,
        families: &[Family],
    ) -> Result<Self> {
        bounds.validate()?;
        if dims.is_empty() {
            return Err(Error::Layout(format!("empty patch dims {dims}")));
        }
        let mut slots = Vec::new();
        let mut offset = 0;
        for family in Family::ALL.into_iter().filter(|f| families.contains(f)) {
            let components = slot_components(family, dims, bounds);
            let n = components.len();
            slots.push(DistortionSlot {
                family,
                offset,
                components,
            });
            offset += n;
        }
        Ok(Self {
            dims,
            slots,
            len: offset,
        })
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.slots
            .iter()
            .flat_map(|s| s.components.iter().map(|c| (c.lo, c.hi)))
            .collect()
    }

    pub fn slot(&self, family: Family) -> Option<&DistortionSlot> {
        self.slots.iter().find(|s| s.family == family)
    }

    /// All switches off; every other component at its lower bound.
    pub fn identity_vector(&self) -> Vec<f64> {
        self.bounds().into_iter().map(|(lo, _)| lo).collect()
    }

    pub fn clamp(&self, vector: &[f64]) -> Result<Vec<f64>> {
        self.check_len(vector)?;
        Ok(vector
            .iter()
            .zip(self.bounds())
            .map(|(&v, (lo, hi))| if v.is_nan() { lo } else { v.clamp(lo, hi) })
            .collect())
    }

    fn check_len(&self, vector: &[f64]) -> Result<()> {
        if vector.len() != self.len {
            return Err(Error::Layout(format!(
                "vector has {} components, layout expects {}",
                vector.len(),
                self.len
            )));
        }
        Ok(())
    }

    /// Families whose switch is on in `vector`.
    pub fn active(&self, vector: &[f64]) -> Vec<Family> {
        self.slots
            .iter()
            .filter(|s| vector.get(s.offset).is_some_and(|&v| v >= SWITCH_THRESHOLD))
            .map(|s| s.family)
            .collect()
    }
}

#[inline]
fn pick(v: f64, n: usize) -> usize {
    if v <= 0.0 {
        0
    } else {
        (v.floor() as usize).min(n - 1)
    }
}

/// `⌈fraction · n⌉`, tolerant of products like `0.05 · 20 = 1.0000000000000002`.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let c = (x - 1e-9).ceil();
    if c <= 0.0 {
        0
    } else {
        (c as usize).min(n)
    }
}

/// Per-slot random stream for candidate `seed`.
pub fn slot_rng(seed: u64, slot_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot_index as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Line(usize),
    Column(usize),
    /// Axis-aligned rectangle, clipped to the patch.
    Region {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

impl Component {
    fn check(&self, dims: Dims) -> Result<()> {
        let ok = match *self {
            Component::Line(r) => r < dims.rows,
            Component::Column(c) => c < dims.cols,
            Component::Region {
                row,
                col,
                height,
                width,
            } => row < dims.rows && col < dims.cols && height >= 1 && width >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Bounds(format!("{self:?} outside patch {dims}")))
        }
    }

    /// Spatial positions `(row, col)` of the component, row-major.
    pub fn pixels(&self, dims: Dims) -> Vec<(usize, usize)> {
        match *self {
            Component::Line(r) => (0..dims.cols).map(|c| (r, c)).collect(),
            Component::Column(c) => (0..dims.rows).map(|r| (r, c)).collect(),
            Component::Region {
                row,
                col,
                height,
                width,
            } => {
                let r_end = (row + height).min(dims.rows);
                let c_end = (col + width).min(dims.cols);
                (row..r_end)
                    .flat_map(|r| (col..c_end).map(move |c| (r, c)))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripeAxis {
    Line,
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseAxis {
    /// Whole spectra of the chosen pixels.
    Spectral,
    /// Chosen pixels within chosen bands.
    Spatial,
}

fn fill_pixels(patch: &mut Patch3D, pixels: &[(usize, usize)], value: f32) {
    let dims = patch.dims();
    let values = patch.values_mut();
    for &(r, c) in pixels {
        let base = dims.index(r, c, 0);
        values[base..base + dims.bands].fill(value);
    }
}

fn fill_value(patch: &Patch3D, fill: Fill) -> f32 {
    match fill {
        Fill::Min => patch.min(),
        Fill::Max => patch.max(),
    }
}

/// Sets every cell of the component, across all bands, to the patch min or max.
pub fn continuous_dropout(patch: &Patch3D, component: Component, fill: Fill) -> Result<Patch3D> {
    component.check(patch.dims())?;
    let mut out = patch.clone();
    let v = fill_value(patch, fill);
    fill_pixels(&mut out, &component.pixels(patch.dims()), v);
    Ok(out)
}

/// Like [`continuous_dropout`], but only `⌈fraction · n⌉` of the component's
/// `n` pixels, chosen uniformly, are filled.
pub fn discontinuous_dropout<R: Rng + ?Sized>(
    patch: &Patch3D,
    component: Component,
    fraction: f64,
    fill: Fill,
    rng: &mut R,
) -> Result<Patch3D> {
    component.check(patch.dims())?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "drop fraction {fraction} outside (0, 1]"
        )));
    }
    let mut out = patch.clone();
    let v = fill_value(patch, fill);
    discontinuous_in_place(&mut out, component, fraction, v, rng);
    Ok(out)
}

fn discontinuous_in_place<R: Rng + ?Sized>(
    patch: &mut Patch3D,
    component: Component,
    fraction: f64,
    value: f32,
    rng: &mut R,
) {
    let pixels = component.pixels(patch.dims());
    let m = ceil_count(fraction, pixels.len());
    let mut chosen: Vec<(usize, usize)> = index::sample(rng, pixels.len(), m)
        .into_iter()
        .map(|i| pixels[i])
        .collect();
    chosen.sort_unstable();
    fill_pixels(patch, &chosen, value);
}

/// Mean and population std of a stripe (all bands).
pub fn stripe_stats(patch: &Patch3D, axis: StripeAxis, index: usize) -> (f64, f64) {
    let cells = stripe_cells(patch.dims(), axis, index);
    let n = cells.len() as f64;
    let values = patch.values();
    let mean = cells.iter().map(|&i| values[i] as f64).sum::<f64>() / n;
    let var = cells
        .iter()
        .map(|&i| {
            let d = values[i] as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

fn stripe_cells(dims: Dims, axis: StripeAxis, index: usize) -> Vec<usize> {
    let component = match axis {
        StripeAxis::Line => Component::Line(index),
        StripeAxis::Column => Component::Column(index),
    };
    component
        .pixels(dims)
        .into_iter()
        .flat_map(|(r, c)| {
            let base = dims.index(r, c, 0);
            base..base + dims.bands
        })
        .collect()
}

/// Re-normalizes one stripe: `x ← (σd/σo)·(x − mo + (σo/σd)·md)` where
/// `(mo, σo)` are the stripe's own statistics, `md = mo + mean_offset·σo`
/// and `σd = std_ratio·σo`. Returns `None` for a constant stripe (`σo = 0`).
pub fn stripping(
    patch: &Patch3D,
    axis: StripeAxis,
    index: usize,
    mean_offset: f64,
    std_ratio: f64,
) -> Result<Option<Patch3D>> {
    let limit = match axis {
        StripeAxis::Line => patch.dims().rows,
        StripeAxis::Column => patch.dims().cols,
    };
    if index >= limit {
        return Err(Error::Bounds(format!(
            "stripe {index} outside patch {}",
            patch.dims()
        )));
    }
    if !(std_ratio > 0.0) {
        return Err(Error::Argument(format!(
            "std ratio must be > 0, got {std_ratio}"
        )));
    }
    let mut out = patch.clone();
    Ok(stripping_in_place(&mut out, axis, index, mean_offset, std_ratio).then_some(out))
}

fn stripping_in_place(
    patch: &mut Patch3D,
    axis: StripeAxis,
    index: usize,
    mean_offset: f64,
    std_ratio: f64,
) -> bool {
    let (m_o, s_o) = stripe_stats(patch, axis, index);
    if s_o == 0.0 || std_ratio <= 0.0 {
        return false;
    }
    let m_d = m_o + mean_offset * s_o;
    let s_d = std_ratio * s_o;
    let cells = stripe_cells(patch.dims(), axis, index);
    let values = patch.values_mut();
    for i in cells {
        let x = values[i] as f64;
        values[i] = ((s_d / s_o) * (x - m_o + (s_o / s_d) * m_d)) as f32;
    }
    true
}

/// Replaces each listed band by the mean of its neighbours in the original
/// patch. Edge bands are moved to the nearest interior band.
pub fn band_loss(patch: &Patch3D, bands: &[usize]) -> Result<Patch3D> {
    let d = patch.dims();
    if d.bands < 3 {
        return Err(Error::Bounds(format!(
            "band loss needs >= 3 bands, patch has {}",
            d.bands
        )));
    }
    if let Some(b) = bands.iter().find(|&&b| b >= d.bands) {
        return Err(Error::Bounds(format!("band {b} outside patch {d}")));
    }
    let mut out = patch.clone();
    band_loss_in_place(&mut out, patch, bands);
    Ok(out)
}

fn band_loss_in_place(patch: &mut Patch3D, source: &Patch3D, bands: &[usize]) {
    let d = patch.dims();
    let values = patch.values_mut();
    for &b in bands {
        let b = b.clamp(1, d.bands - 2);
        for r in 0..d.rows {
            for c in 0..d.cols {
                let prev = source.get(r, c, b - 1) as f64;
                let next = source.get(r, c, b + 1) as f64;
                values[d.index(r, c, b)] = ((prev + next) / 2.0) as f32;
            }
        }
    }
}

/// Sets `⌈density · cells⌉` distinct cells to the patch max (salt) or min
/// (pepper), each with probability ½.
pub fn salt_pepper<R: Rng + ?Sized>(patch: &Patch3D, density: f64, rng: &mut R) -> Result<Patch3D> {
    salt_pepper_with(patch, density, 0.5, rng)
}

/// [`salt_pepper`] with an explicit salt probability.
pub fn salt_pepper_with<R: Rng + ?Sized>(
    patch: &Patch3D,
    density: f64,
    salt_probability: f64,
    rng: &mut R,
) -> Result<Patch3D> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument(format!("density {density} outside (0, 1]")));
    }
    if !(0.0..=1.0).contains(&salt_probability) {
        return Err(Error::Argument(format!(
            "salt probability {salt_probability} outside [0, 1]"
        )));
    }
    let mut out = patch.clone();
    salt_pepper_in_place(
        &mut out,
        density,
        salt_probability,
        patch.min(),
        patch.max(),
        rng,
    );
    Ok(out)
}

fn salt_pepper_in_place<R: Rng + ?Sized>(
    patch: &mut Patch3D,
    density: f64,
    salt_probability: f64,
    pepper: f32,
    salt: f32,
    rng: &mut R,
) {
    let n = patch.dims().len();
    let m = ceil_count(density, n);
    let mut cells = index::sample(rng, n, m).into_vec();
    cells.sort_unstable();
    let values = patch.values_mut();
    for i in cells {
        values[i] = if rng.random_bool(salt_probability) {
            salt
        } else {
            pepper
        };
    }
}

/// Adds `N(mean, sigma)` noise. Spectral mode targets the full spectra of
/// `⌈fraction · pixels⌉` pixels; spatial mode targets the same number of
/// pixels within `⌈fraction · bands⌉` chosen bands.
pub fn gaussian_noise<R: Rng + ?Sized>(
    patch: &Patch3D,
    axis: NoiseAxis,
    mean: f64,
    sigma: f64,
    fraction: f64,
    rng: &mut R,
) -> Result<Patch3D> {
    if !(sigma >= 0.0 && sigma.is_finite() && mean.is_finite()) {
        return Err(Error::Argument(format!(
            "invalid noise parameters N({mean}, {sigma})"
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Argument(format!(
            "fraction {fraction} outside [0, 1]"
        )));
    }
    let mut out = patch.clone();
    gaussian_in_place(&mut out, axis, mean, sigma, fraction, rng);
    Ok(out)
}

fn gaussian_in_place<R: Rng + ?Sized>(
    patch: &mut Patch3D,
    axis: NoiseAxis,
    mean: f64,
    sigma: f64,
    fraction: f64,
    rng: &mut R,
) {
    let d = patch.dims();
    let normal = Normal::new(mean, sigma).expect("sigma validated");
    let mut pixels = index::sample(rng, d.pixels(), ceil_count(fraction, d.pixels())).into_vec();
    pixels.sort_unstable();
    let bands: Vec<usize> = match axis {
        NoiseAxis::Spectral => (0..d.bands).collect(),
        NoiseAxis::Spatial => {
            let mut b = index::sample(rng, d.bands, ceil_count(fraction, d.bands)).into_vec();
            b.sort_unstable();
            b
        }
    };
    let values = patch.values_mut();
    for p in pixels {
        let (r, c) = (p / d.cols, p % d.cols);
        for &b in &bands {
            let i = d.index(r, c, b);
            values[i] = (values[i] as f64 + normal.sample(rng)) as f32;
        }
    }
}

#[inline]
fn nearest(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Nearest-neighbour resampling of every band through `map`, which sends an
/// output position offset from the centre to a source offset. Positions that
/// land outside the patch take the patch mean.
fn resample(patch: &Patch3D, map: impl Fn(f64, f64) -> (f64, f64)) -> Patch3D {
    let d = patch.dims();
    let fill = patch.mean() as f32;
    let ci = (d.rows as f64 - 1.0) / 2.0;
    let cj = (d.cols as f64 - 1.0) / 2.0;
    let mut out = patch.clone();
    let values = out.values_mut();
    for i in 0..d.rows {
        for j in 0..d.cols {
            let (si, sj) = map(i as f64 - ci, j as f64 - cj);
            let (si, sj) = (nearest(ci + si), nearest(cj + sj));
            let inside = si >= 0 && sj >= 0 && (si as usize) < d.rows && (sj as usize) < d.cols;
            let dst = d.index(i, j, 0);
            if inside {
                let src = d.index(si as usize, sj as usize, 0);
                values[dst..dst + d.bands].copy_from_slice(&patch.values()[src..src + d.bands]);
            } else {
                values[dst..dst + d.bands].fill(fill);
            }
        }
    }
    out
}

/// Rotates every band about the spatial centre. Positive angles turn the
/// image counter-clockwise as displayed with row 0 at the top.
pub fn rotation(patch: &Patch3D, angle_deg: f64) -> Patch3D {
    if angle_deg == 0.0 {
        return patch.clone();
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    resample(patch, |di, dj| (c * di + s * dj, c * dj - s * di))
}

/// Rescales every band about the spatial centre; `factor > 1` zooms in.
pub fn zoom(patch: &Patch3D, factor: f64) -> Result<Patch3D> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Argument(format!(
            "zoom factor must be > 0, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(patch.clone());
    }
    Ok(resample(patch, |di, dj| (di / factor, dj / factor)))
}

fn decode_component(variant: usize, row: usize, col: usize, h: usize, w: usize) -> Component {
    match variant {
        0 => Component::Line(row),
        1 => Component::Column(col),
        _ => Component::Region {
            row,
            col,
            height: h,
            width: w,
        },
    }
}

/// Applies every active slot of `vector` to `original`, in registry order.
/// The vector is clamped into the layout bounds first.
pub fn decode(layout: &Layout, vector: &[f64], original: &Patch3D, seed: u64) -> Result<Patch3D> {
    if original.dims() != layout.dims {
        return Err(Error::Layout(format!(
            "layout built for {}, patch is {}",
            layout.dims,
            original.dims()
        )));
    }
    let v = layout.clamp(vector)?;
    let d = layout.dims;
    let (lo, hi) = (original.min(), original.max());
    let range = (hi - lo) as f64;
    let mut out = original.clone();
    for (slot_index, slot) in layout.slots.iter().enumerate() {
        let c = &v[slot.offset..slot.offset + slot.components.len()];
        if c[0] < SWITCH_THRESHOLD {
            continue;
        }
        let mut rng = slot_rng(seed, slot_index);
        match slot.family {
            Family::ContinuousDropout | Family::DiscontinuousDropout => {
                let component = decode_component(
                    pick(c[1], 3),
                    pick(c[2], d.rows),
                    pick(c[3], d.cols),
                    pick(c[4], d.rows + 1).max(1),
                    pick(c[5], d.cols + 1).max(1),
                );
                let value = if pick(c[6], 2) == 0 { lo } else { hi };
                if slot.family == Family::ContinuousDropout {
                    fill_pixels(&mut out, &component.pixels(d), value);
                } else {
                    let fraction = c[7].clamp(f64::MIN_POSITIVE, 1.0);
                    discontinuous_in_place(&mut out, component, fraction, value, &mut rng);
                }
            }
            Family::Stripping => {
                let (axis, index) = if pick(c[1], 2) == 0 {
                    (StripeAxis::Line, pick(c[2], d.rows))
                } else {
                    (StripeAxis::Column, pick(c[3], d.cols))
                };
                stripping_in_place(&mut out, axis, index, c[4], c[5]);
            }
            Family::BandLoss => {
                if d.bands >= 3 {
                    let start = pick(c[1], d.bands - 1).max(1);
                    let count = pick(c[2], d.bands + 1).max(1);
                    let end = (start + count).min(d.bands - 1);
                    let bands: Vec<usize> = (start..end).collect();
                    let source = out.clone();
                    band_loss_in_place(&mut out, &source, &bands);
                }
            }
            Family::SaltPepper => {
                let density = c[1].clamp(0.0, 1.0);
                salt_pepper_in_place(&mut out, density, 0.5, lo, hi, &mut rng);
            }
            Family::GaussianNoise => {
                let axis = if pick(c[1], 2) == 0 {
                    NoiseAxis::Spectral
                } else {
                    NoiseAxis::Spatial
                };
                let sigma = (c[3] * range).max(0.0);
                gaussian_in_place(
                    &mut out,
                    axis,
                    c[2] * range,
                    sigma,
                    c[4].clamp(0.0, 1.0),
                    &mut rng,
                );
            }
            Family::Rotation => out = rotation(&out, c[1]),
            Family::Zoom => out = zoom(&out, c[1])?,
        }
    }
    Ok(out)
}

/// One row of the bound-tuning audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneAuditRow {
    pub family: Family,
    pub step: usize,
    pub median_psnr: f64,
    pub ranges: Vec<(String, ParamRange)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub bounds: DistortionBounds,
    pub audit: Vec<TuneAuditRow>,
    /// Families still below the threshold after the last halving.
    pub flagged: Vec<Family>,
}

pub const MAX_HALVINGS: usize = 10;
pub const MIN_TUNE_BUDGET: usize = 100;

/// Narrows each family's parameter ranges toward their identity values until
/// the median PSNR of random single-family distortions reaches `threshold`.
///
/// Samples reuse the same random numbers at every halving step, so a
/// narrowing changes only the parameter scale, not the draw.
pub fn tune_bounds(
    initial: &DistortionBounds,
    families: &[Family],
    patches: &PatchSet,
    threshold: f64,
    budget: usize,
    seed: u64,
) -> Result<TuneOutcome> {
    let dims = patches
        .dims()
        .ok_or_else(|| Error::Argument("tuning needs a non-empty patch set".into()))?;
    if budget < MIN_TUNE_BUDGET {
        return Err(Error::Argument(format!(
            "tuning budget must be >= {MIN_TUNE_BUDGET} samples per family, got {budget}"
        )));
    }
    initial.validate()?;
    let mut bounds = initial.clone();
    let mut audit = Vec::new();
    let mut flagged = Vec::new();
    for &family in families {
        let mut step = 0;
        loop {
            let median = sample_median_psnr(&bounds, family, patches, dims, budget, seed)?;
            let ranges = {
                let mut b = bounds.clone();
                let names = tunable_names(family);
                b.tunables(family)
                    .into_iter()
                    .zip(names)
                    .map(|((r, _), n)| (n.to_string(), *r))
                    .collect()
            };
            audit.push(TuneAuditRow {
                family,
                step,
                median_psnr: median,
                ranges,
            });
            if median >= threshold {
                break;
            }
            if step == MAX_HALVINGS {
                flagged.push(family);
                break;
            }
            for (range, identity) in bounds.tunables(family) {
                *range = range.halved_toward(identity);
            }
            step += 1;
        }
    }
    Ok(TuneOutcome {
        bounds,
        audit,
        flagged,
    })
}

fn tunable_names(family: Family) -> &'static [&'static str] {
    match family {
        Family::ContinuousDropout => &["continuous_region_height", "continuous_region_width"],
        Family::DiscontinuousDropout => &[
            "discontinuous_region_height",
            "discontinuous_region_width",
            "drop_fraction",
        ],
        Family::Stripping => &["strip_mean_offset", "strip_std_ratio"],
        Family::BandLoss => &["band_count"],
        Family::SaltPepper => &["salt_pepper_density"],
        Family::GaussianNoise => &["gaussian_mean", "gaussian_sigma", "gaussian_fraction"],
        Family::Rotation => &["rotation_angle"],
        Family::Zoom => &["zoom_factor"],
    }
}

fn sample_median_psnr(
    bounds: &DistortionBounds,
    family: Family,
    patches: &PatchSet,
    dims: Dims,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    let layout = Layout::with_families(dims, bounds, &[family])?;
    let slot = &layout.slots[0];
    let mut values = Vec::with_capacity(budget);
    for s in 0..budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((family as u64) << 32) | s as u64);
        let patch = &patches.patches[rng.random_range(0..patches.len())];
        let candidate_seed: u64 = rng.random();
        let vector: Vec<f64> = slot
            .components
            .iter()
            .map(|c| {
                let u: f64 = rng.random();
                match c.kind {
                    ComponentKind::Switch => 1.0,
                    _ => c.lo + u * (c.hi - c.lo),
                }
            })
            .collect();
        let distorted = decode(&layout, &vector, patch, candidate_seed)?;
        values.push(psnr(patch, &distorted)?);
    }
    Ok(crate::metrics::median(&values).expect("budget >= 100"))
}

/// CSV rendering of the tuning audit: one row per (family, halving step).
pub fn audit_csv(rows: &[TuneAuditRow]) -> String {
    let mut out = String::from("family,step,median_psnr,ranges\n");
    for r in rows {
        let ranges: Vec<String> = r
            .ranges
            .iter()
            .map(|(n, p)| format!("{n}=[{};{}]", p.lo, p.hi))
            .collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.family,
            r.step,
            crate::patch::format_psnr(r.median_psnr),
            ranges.join(" ")
        ));
    }
    out
}
