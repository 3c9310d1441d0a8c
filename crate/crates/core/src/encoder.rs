//! Frozen handcrafted feature encoder.
//!
//! Each `cell × cell` block of the input maps to one latent vector of
//! patch statistics over the RGB frame and the flow fields. Every statistic
//! only reads pixels inside its own cell, so the receptive field of a latent
//! cell is exactly its pixel block.
//!
//! Every raw feature is a sum of non-negative per-pixel terms (or, for the
//! maximum, a single pixel), which is what relevance propagation uses to map
//! feature relevance back onto pixels.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, SampleSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const RECIPE_VERSION: &str = "hcf-v1";
pub const FEATURE_COUNT: usize = 32;

/// Luminance gradient magnitude below which a pixel counts as smooth.
const SMOOTH_THRESHOLD: f64 = 0.02;

thread_local! {
    static ENCODE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`encode`] calls made on the current thread.
pub fn encode_calls() -> u64 {
    ENCODE_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub cell_size: u32,
    pub depth: usize,
    pub recipe: String,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            cell_size: 8,
            depth: FEATURE_COUNT,
            recipe: RECIPE_VERSION.to_string(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recipe != RECIPE_VERSION {
            return Err(Error::Config(format!(
                "unknown feature recipe {:?} (this build provides {RECIPE_VERSION:?})",
                self.recipe
            )));
        }
        if !(8..=FEATURE_COUNT).contains(&self.depth) {
            return Err(Error::Config(format!(
                "depth must lie in 8..={FEATURE_COUNT}, got {}",
                self.depth
            )));
        }
        if self.cell_size < 2 {
            return Err(Error::Config(format!(
                "cell size must be at least 2, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    pub fn grid_for(&self, height: u32, width: u32) -> Result<(usize, usize)> {
        if height % self.cell_size != 0 || width % self.cell_size != 0 {
            return Err(Error::Shape(format!(
                "cell size {} does not divide image {}x{}",
                self.cell_size, width, height
            )));
        }
        Ok((
            (height / self.cell_size) as usize,
            (width / self.cell_size) as usize,
        ))
    }
}

/// Encoder output for one sample: an `H'×W'×D` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMap {
    pub grid: Tensor,
    pub sample_id: String,
    pub cell_size: u32,
    pub recipe: String,
}

impl LatentMap {
    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Latent vector at cell `(h, w)`.
    pub fn patch(&self, h: usize, w: usize) -> &[f32] {
        let d = self.depth();
        let i = (h * self.cols() + w) * d;
        &self.grid.data()[i..i + d]
    }

    /// Input-pixel block that cell `(h, w)` summarizes.
    pub fn receptive_field(&self, h: usize, w: usize) -> BBox {
        let c = self.cell_size;
        BBox {
            x0: w as u32 * c,
            y0: h as u32 * c,
            x1: (w as u32 + 1) * c,
            y1: (h as u32 + 1) * c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureGroup {
    Appearance,
    Motion,
}

/// `(t(raw) - center) / scale` with `t` the identity or the square root.
///
/// Centers sit at the pristine mean of each statistic, so face cells without
/// artifacts cluster around the origin and artifacts point away from it in
/// kind-specific directions.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Norm {
    Linear {
        center: f64,
        scale: f64,
    },
    /// For heavy-tailed energies.
    Sqrt {
        center: f64,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureSpec {
    pub name: &'static str,
    pub group: FeatureGroup,
    norm: Norm,
}

const fn motion(name: &'static str, center: f64, scale: f64) -> FeatureSpec {
    FeatureSpec {
        name,
        group: FeatureGroup::Motion,
        norm: Norm::Linear { center, scale },
    }
}

const fn appearance(name: &'static str, center: f64, scale: f64) -> FeatureSpec {
    FeatureSpec {
        name,
        group: FeatureGroup::Appearance,
        norm: Norm::Linear { center, scale },
    }
}

/// Feature order of recipe `hcf-v1`. A configured depth keeps the first `depth` entries.
///
/// The constants were measured once on pristine synthetic faces and are part
/// of the recipe.
pub static FEATURES: [FeatureSpec; FEATURE_COUNT] = [
    motion("flow_mean_mag", 0.556, 0.4),
    motion("flow_max_mag", 0.62, 0.6),
    motion("flow_abs_divergence", 0.0, 0.08),
    FeatureSpec {
        name: "flow_temporal_var",
        group: FeatureGroup::Motion,
        norm: Norm::Sqrt {
            center: 0.058,
            scale: 0.5,
        },
    },
    appearance("r_mean", 0.45, 0.40),
    appearance("r_var", 0.009, 0.04),
    appearance("r_grad", 0.093, 0.06),
    appearance("g_mean", 0.40, 0.25),
    appearance("g_var", 0.009, 0.04),
    appearance("g_grad", 0.093, 0.06),
    appearance("b_mean", 0.38, 0.25),
    appearance("b_var", 0.009, 0.04),
    appearance("b_grad", 0.093, 0.06),
    appearance("r_orient_0", 0.022, 0.04),
    appearance("r_orient_1", 0.022, 0.04),
    appearance("r_orient_2", 0.022, 0.04),
    appearance("r_orient_3", 0.022, 0.04),
    appearance("g_orient_0", 0.022, 0.04),
    appearance("g_orient_1", 0.022, 0.04),
    appearance("g_orient_2", 0.022, 0.04),
    appearance("g_orient_3", 0.022, 0.04),
    appearance("b_orient_0", 0.022, 0.04),
    appearance("b_orient_1", 0.022, 0.04),
    appearance("b_orient_2", 0.022, 0.04),
    appearance("b_orient_3", 0.022, 0.04),
    appearance("smooth_fraction", 0.054, 0.05),
    motion("flow_mean_dx", -0.05, 0.5),
    motion("flow_mean_dy", -0.05, 0.5),
    motion("flow_abs_curl", 0.0015, 0.08),
    motion("flow_reversal_fraction", 0.0, 0.2),
    appearance("lum_laplacian", 0.18, 0.12),
    motion("flow_mag_change", 0.0485, 0.15),
];

/// Global output gain. Keeps squared distances between ordinary cells well
/// below 1 and between artifact kinds in the low single digits, where the
/// log-ratio similarity still has usable slope.
pub const LATENT_GAIN: f64 = 0.1;

impl FeatureSpec {
    pub fn normalize(&self, raw: f64) -> f64 {
        let z = match self.norm {
            Norm::Linear { center, scale } => (raw - center) / scale,
            Norm::Sqrt { center, scale } => (raw.max(0.0).sqrt() - center) / scale,
        };
        z * LATENT_GAIN
    }
}

/// Where a unit of relevance lands in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputSite {
    /// RGB pixel (all three channels pooled).
    Rgb { x: u32, y: u32 },
    /// Pixel of flow field `t` (both components pooled).
    Flow { t: usize, x: u32, y: u32 },
}

/// Non-negative per-site weights whose normalized values split a feature's
/// relevance across the input.
pub type FeatureShares = Vec<(InputSite, f64)>;

struct CellView {
    b: BBox,
}

impl CellView {
    fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let b = self.b;
        (b.y0..b.y1).flat_map(move |y| (b.x0..b.x1).map(move |x| (x, y)))
    }

    fn n(&self) -> f64 {
        self.b.area() as f64
    }

    /// Within-cell forward difference, falling back to a backward difference on the far edge.
    fn diff(&self, x: u32, y: u32, g: &dyn Fn(u32, u32) -> f64) -> (f64, f64) {
        let b = self.b;
        let gx = if x + 1 < b.x1 {
            g(x + 1, y) - g(x, y)
        } else {
            g(x, y) - g(x - 1, y)
        };
        let gy = if y + 1 < b.y1 {
            g(x, y + 1) - g(x, y)
        } else {
            g(x, y) - g(x, y - 1)
        };
        (gx, gy)
    }

    /// Five-point Laplacian with neighbors reflected at the cell border.
    fn laplacian(&self, x: u32, y: u32, g: &dyn Fn(u32, u32) -> f64) -> f64 {
        let b = self.b;
        let left = if x > b.x0 { x - 1 } else { x + 1 };
        let right = if x + 1 < b.x1 { x + 1 } else { x - 1 };
        let up = if y > b.y0 { y - 1 } else { y + 1 };
        let down = if y + 1 < b.y1 { y + 1 } else { y - 1 };
        g(left, y) + g(right, y) + g(x, up) + g(x, down) - 4.0 * g(x, y)
    }
}

fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut a = gy.atan2(gx);
    if a < 0.0 {
        a += std::f64::consts::PI;
    }
    ((a / (std::f64::consts::PI / 4.0)) as usize).min(3)
}

/// Raw (un-normalized) statistics of one cell, with optional per-site shares.
pub fn raw_cell_features(
    sample: &SampleSequence,
    cell: BBox,
    mut shares: Option<&mut Vec<FeatureShares>>,
) -> [f64; FEATURE_COUNT] {
    let v = CellView { b: cell };
    let n = v.n();
    let fields = sample.flows.len();
    let mut out = [0.0f64; FEATURE_COUNT];
    if let Some(sh) = shares.as_deref_mut() {
        sh.clear();
        sh.resize(FEATURE_COUNT, Vec::new());
    }
    let mut push = |feature: usize, site: InputSite, w: f64| {
        if let Some(sh) = shares.as_deref_mut() {
            if w > 0.0 {
                sh[feature].push((site, w));
            }
        }
    };

    // Flow statistics.
    let mag = |t: usize, x: u32, y: u32| {
        let (dx, dy) = sample.flow_at(t, x, y);
        ((dx as f64).powi(2) + (dy as f64).powi(2)).sqrt()
    };
    let tn = fields as f64 * n;
    let mut max_mag = (
        0.0f64,
        InputSite::Flow {
            t: 0,
            x: cell.x0,
            y: cell.y0,
        },
    );
    let (mut sum_dx, mut sum_dy) = (0.0, 0.0);
    for t in 0..fields {
        let u = |x: u32, y: u32| sample.flow_at(t, x, y).0 as f64;
        let w_ = |x: u32, y: u32| sample.flow_at(t, x, y).1 as f64;
        for (x, y) in v.pixels() {
            let site = InputSite::Flow { t, x, y };
            let m = mag(t, x, y);
            out[0] += m / tn;
            push(0, site, m);
            if m > max_mag.0 {
                max_mag = (m, site);
            }
            let (ux, uy) = v.diff(x, y, &u);
            let (vx, vy) = v.diff(x, y, &w_);
            let div = (ux + vy).abs();
            out[2] += div / tn;
            push(2, site, div);
            let curl = (vx - uy).abs();
            out[28] += curl / tn;
            push(28, site, curl);
            let (dx, dy) = sample.flow_at(t, x, y);
            sum_dx += dx as f64;
            sum_dy += dy as f64;
            if t > 0 {
                let (px, py) = sample.flow_at(t - 1, x, y);
                let rev = if (dx * px + dy * py) < 0.0 { 1.0 } else { 0.0 };
                let denom = (fields - 1) as f64 * n;
                out[29] += rev / denom;
                push(29, site, rev);
                let change = (m - mag(t - 1, x, y)).abs();
                out[31] += change / denom;
                push(31, site, change);
            }
        }
    }
    out[1] = max_mag.0;
    push(1, max_mag.1, 1.0);
    out[26] = sum_dx / tn;
    out[27] = sum_dy / tn;
    for t in 0..fields {
        for (x, y) in v.pixels() {
            let site = InputSite::Flow { t, x, y };
            let (dx, dy) = sample.flow_at(t, x, y);
            push(26, site, (dx as f64) * out[26].signum());
            push(27, site, (dy as f64) * out[27].signum());
        }
    }
    // Temporal variance per pixel, split over fields by squared deviation.
    for (x, y) in v.pixels() {
        let (mut mu, mut mv) = (0.0, 0.0);
        for t in 0..fields {
            let (dx, dy) = sample.flow_at(t, x, y);
            mu += dx as f64;
            mv += dy as f64;
        }
        mu /= fields as f64;
        mv /= fields as f64;
        for t in 0..fields {
            let (dx, dy) = sample.flow_at(t, x, y);
            let dev = (dx as f64 - mu).powi(2) + (dy as f64 - mv).powi(2);
            out[3] += dev / tn;
            push(3, InputSite::Flow { t, x, y }, dev);
        }
    }

    // Appearance statistics per channel.
    for c in 0..3 {
        let base = 4 + 3 * c;
        let obase = 13 + 4 * c;
        let g = |x: u32, y: u32| sample.rgb_at(x, y, c) as f64;
        let mean: f64 = v.pixels().map(|(x, y)| g(x, y)).sum::<f64>() / n;
        out[base] = mean;
        for (x, y) in v.pixels() {
            let site = InputSite::Rgb { x, y };
            let val = g(x, y);
            push(base, site, val);
            let dev = (val - mean).powi(2);
            out[base + 1] += dev / n;
            push(base + 1, site, dev);
            let (gx, gy) = v.diff(x, y, &g);
            let m = (gx * gx + gy * gy).sqrt();
            out[base + 2] += m / n;
            push(base + 2, site, m);
            if m > 0.0 {
                let bin = orientation_bin(gx, gy);
                out[obase + bin] += m / n;
                push(obase + bin, site, m);
            }
        }
    }

    let lum = |x: u32, y: u32| (0..3).map(|c| sample.rgb_at(x, y, c) as f64).sum::<f64>() / 3.0;
    for (x, y) in v.pixels() {
        let site = InputSite::Rgb { x, y };
        let (gx, gy) = v.diff(x, y, &lum);
        if (gx * gx + gy * gy).sqrt() < SMOOTH_THRESHOLD {
            out[25] += 1.0 / n;
            push(25, site, 1.0);
        }
        let lap = v.laplacian(x, y, &lum).abs();
        out[30] += lap / n;
        push(30, site, lap);
    }
    out
}

/// Uniform fallback support for a feature whose shares are all zero.
pub fn feature_support(spec: &FeatureSpec, cell: BBox, fields: usize) -> FeatureShares {
    let pixels = (cell.y0..cell.y1).flat_map(move |y| (cell.x0..cell.x1).map(move |x| (x, y)));
    match spec.group {
        FeatureGroup::Appearance => pixels
            .map(|(x, y)| (InputSite::Rgb { x, y }, 1.0))
            .collect(),
        FeatureGroup::Motion => pixels
            .flat_map(|(x, y)| (0..fields).map(move |t| (InputSite::Flow { t, x, y }, 1.0)))
            .collect(),
    }
}

/// Maps a sample to its latent grid.
pub fn encode(sample: &SampleSequence, cfg: &EncoderConfig) -> Result<LatentMap> {
    ENCODE_CALLS.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    sample.validate()?;
    let (rows, cols) = cfg.grid_for(sample.height, sample.width)?;
    let d = cfg.depth;
    let mut data = Vec::with_capacity(rows * cols * d);
    let c = cfg.cell_size;
    for h in 0..rows {
        for w in 0..cols {
            let b = BBox {
                x0: w as u32 * c,
                y0: h as u32 * c,
                x1: (w as u32 + 1) * c,
                y1: (h as u32 + 1) * c,
            };
            let raw = raw_cell_features(sample, b, None);
            data.extend(
                FEATURES[..d]
                    .iter()
                    .zip(raw)
                    .map(|(spec, r)| spec.normalize(r) as f32),
            );
        }
    }
    let grid = Tensor::new(vec![rows, cols, d], data)
        .map_err(|e| Error::NonFinite(format!("encoding {}: {e}", sample.id)))?;
    Ok(LatentMap {
        grid,
        sample_id: sample.id.clone(),
        cell_size: c,
        recipe: cfg.recipe.clone(),
    })
}
