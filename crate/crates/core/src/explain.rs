//! Explanations: relevance maps, 2D projections, landmark density and radar series.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, Label, LandmarkName, SampleSequence};
use crate::encoder::{feature_support, raw_cell_features, InputSite, LatentMap, FEATURES};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::numerics::{similarity, squared_distances};
use crate::protonet::{ModelVersion, PrototypeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Seeding {
    /// Only the best-matching cell carries the maxsim.
    #[default]
    ArgmaxCell,
    /// Every cell is seeded with its own similarity.
    AllCells,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrpConfig {
    pub seeding: Seeding,
    /// Reference point `r` of the distance rule: feature `i` receives
    /// `max(0, (r - p_i)^2 - (z_i - p_i)^2)`, its share of how much closer the
    /// patch is to the prototype than the reference is.
    pub reference: f64,
}

impl Default for PrpConfig {
    fn default() -> Self {
        Self {
            seeding: Seeding::ArgmaxCell,
            reference: 0.0,
        }
    }
}

/// Relevance of every input pixel for one prototype on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub prototype_id: PrototypeId,
    pub sample_id: String,
    pub height: u32,
    pub width: u32,
    /// Seeded cells with their seed values.
    pub cells: Vec<((usize, usize), f64)>,
    /// Receptive field of the argmax cell.
    pub bbox: BBox,
    /// Sum of all seeds.
    pub total: f64,
    /// Relevance per latent feature, summed over seeded cells.
    pub features: Vec<f64>,
    /// `height × width`, RGB channels pooled.
    pub rgb: Vec<f64>,
    /// One `height × width` grid per flow field.
    pub flows: Vec<Vec<f64>>,
}

impl RelevanceMap {
    pub fn rgb_mass(&self) -> f64 {
        self.rgb.iter().sum()
    }

    pub fn flow_mass(&self) -> f64 {
        self.flows.iter().flatten().sum()
    }

    pub fn input_mass(&self) -> f64 {
        self.rgb_mass() + self.flow_mass()
    }
}

/// Splits `seed` over features by the reference-point distance rule; uniform if no
/// feature is closer than the reference.
fn feature_relevance(z: &[f32], p: &[f32], reference: f64, seed: f64) -> Vec<f64> {
    let c: Vec<f64> = z
        .iter()
        .zip(p)
        .map(|(&z, &p)| {
            let (z, p) = (z as f64, p as f64);
            ((reference - p).powi(2) - (z - p).powi(2)).max(0.0)
        })
        .collect();
    let total: f64 = c.iter().sum();
    if total > 0.0 {
        c.iter().map(|v| seed * v / total).collect()
    } else {
        vec![seed / z.len() as f64; z.len()]
    }
}

/// Propagates a prototype's similarity on `sample` back to its input pixels.
///
/// `latent` must be the encoding of `sample`.
pub fn prp_map(
    model: &ModelVersion,
    sample: &SampleSequence,
    latent: &LatentMap,
    proto_id: PrototypeId,
    cfg: &PrpConfig,
) -> Result<RelevanceMap> {
    let proto = model.prototype(proto_id)?;
    if latent.sample_id != sample.id {
        return Err(Error::InvalidArgument(format!(
            "latent map of {} does not belong to sample {}",
            latent.sample_id, sample.id
        )));
    }
    if latent.rows() * latent.cell_size as usize != sample.height as usize
        || latent.cols() * latent.cell_size as usize != sample.width as usize
    {
        return Err(Error::Shape(format!(
            "latent grid does not tile sample {}",
            sample.id
        )));
    }
    let dist = squared_distances(&latent.grid, &proto.vector)?;
    let best = (0..dist.len()).fold(0, |b, i| if dist[i] < dist[b] { i } else { b });
    let cols = latent.cols();
    let seeds: Vec<(usize, f64)> = match cfg.seeding {
        Seeding::ArgmaxCell => vec![(best, similarity(dist[best], &model.similarity)?)],
        Seeding::AllCells => dist
            .iter()
            .enumerate()
            .map(|(i, &d)| similarity(d, &model.similarity).map(|s| (i, s)))
            .collect::<Result<_>>()?,
    };

    let (w, h) = (sample.width as usize, sample.height as usize);
    let fields = sample.flows.len();
    let d = model.depth();
    let mut out = RelevanceMap {
        prototype_id: proto_id,
        sample_id: sample.id.clone(),
        height: sample.height,
        width: sample.width,
        cells: Vec::with_capacity(seeds.len()),
        bbox: latent.receptive_field(best / cols, best % cols),
        total: 0.0,
        features: vec![0.0; d],
        rgb: vec![0.0; w * h],
        flows: vec![vec![0.0; w * h]; fields],
    };
    let mut shares = Vec::new();
    for (cell, seed) in seeds {
        let (ch, cw) = (cell / cols, cell % cols);
        out.cells.push(((ch, cw), seed));
        out.total += seed;
        let fr = feature_relevance(latent.patch(ch, cw), &proto.vector, cfg.reference, seed);
        let bbox = latent.receptive_field(ch, cw);
        raw_cell_features(sample, bbox, Some(&mut shares));
        for (f, &r) in fr.iter().enumerate() {
            out.features[f] += r;
            if r == 0.0 {
                continue;
            }
            let fallback;
            let sites = if shares[f].is_empty() {
                fallback = feature_support(&FEATURES[f], bbox, fields);
                &fallback
            } else {
                &shares[f]
            };
            let norm: f64 = sites.iter().map(|s| s.1).sum();
            for &(site, weight) in sites {
                let v = r * weight / norm;
                match site {
                    InputSite::Rgb { x, y } => out.rgb[y as usize * w + x as usize] += v,
                    InputSite::Flow { t, x, y } => out.flows[t][y as usize * w + x as usize] += v,
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    #[default]
    Pca,
    NeighborEmbed,
}

/// Exact top-two principal coordinates.
///
/// Sums run over the vectors in a canonical order, so the result for each
/// input vector does not depend on the order they are passed in. Each axis is
/// signed so that its largest-magnitude loading is positive; an axis whose
/// variance is negligible next to the first is returned as exactly zero.
pub fn pca_2d(vectors: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "projection needs at least 3 vectors, got {n}"
        )));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(
            "projection vectors must share one non-zero length".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vectors[a]
            .iter()
            .zip(&vectors[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0f64; d];
    for &i in &order {
        for (m, &v) in mean.iter_mut().zip(&vectors[i]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = |i: usize| vectors[i].iter().zip(&mean).map(|(&v, m)| v as f64 - m);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in &order {
        let c: Vec<f64> = centered(i).collect();
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(cov / n as f64);
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[axes[0]];
    if !(top > 1e-12) {
        return Err(Error::InvalidArgument(
            "vectors have no variance to project".into(),
        ));
    }
    let mut basis = Vec::with_capacity(2);
    for &k in &axes[..2.min(d)] {
        if eig.eigenvalues[k] <= top * 1e-10 {
            basis.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = (0..d).fold(0, |b, i| {
            if v[i].abs() > v[b].abs() + 1e-12 {
                i
            } else {
                b
            }
        });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(Some(v));
    }
    basis.resize(2, None);
    Ok((0..n)
        .map(|i| {
            let c: Vec<f64> = centered(i).collect();
            let coord = |b: &Option<Vec<f64>>| {
                b.as_ref()
                    .map_or(0.0, |v| v.iter().zip(&c).map(|(x, y)| x * y).sum())
            };
            [coord(&basis[0]), coord(&basis[1])]
        })
        .collect())
}

pub const EMBED_ITERATIONS: usize = 200;

/// Attraction along a k-nearest-neighbor graph and sampled repulsion, from a
/// seeded random start.
pub fn neighbor_embed(vectors: &[Vec<f32>], seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "projection needs at least 3 vectors, got {n}"
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape(
            "projection vectors must share one length".into(),
        ));
    }
    let k = 10.min(n - 1);
    let mut edges = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                (
                    crate::numerics::squared_distance(&vectors[i], &vectors[j]),
                    j,
                )
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(dists[..k].iter().map(|&(_, j)| (i, j)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect();
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    let negatives = 5;
    for it in 0..EMBED_ITERATIONS {
        let lr = 1.0 - it as f64 / EMBED_ITERATIONS as f64;
        for &(i, j) in &edges {
            let diff = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1];
            let coef = -2.0 / (1.0 + d2);
            for a in 0..2 {
                let g = clip(coef * diff[a]) * lr;
                y[i][a] += g;
                y[j][a] -= g;
            }
            for _ in 0..negatives {
                let m = rng.random_range(0..n);
                if m == i {
                    continue;
                }
                let diff = [y[i][0] - y[m][0], y[i][1] - y[m][1]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1];
                let coef = 2.0 / ((1e-3 + d2) * (1.0 + d2));
                for a in 0..2 {
                    y[i][a] += clip(coef * diff[a]) * lr;
                }
            }
        }
    }
    Ok(y)
}

pub fn project_2d(
    vectors: &[Vec<f32>],
    method: ProjectionMethod,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    match method {
        ProjectionMethod::Pca => pca_2d(vectors),
        ProjectionMethod::NeighborEmbed => neighbor_embed(vectors, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityBin {
    pub landmark: LandmarkName,
    pub pristine: usize,
    pub manipulated: usize,
}

/// Prototype counts per landmark, in the fixed landmark order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub bins: Vec<DensityBin>,
}

impl DensityHistogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.pristine + b.manipulated).sum()
    }

    pub fn count(&self, landmark: LandmarkName) -> usize {
        let b = &self.bins[landmark.index()];
        b.pristine + b.manipulated
    }
}

/// Assigns every prototype to the landmark of its source sample nearest to the
/// center of its source crop.
pub fn landmark_density(model: &ModelVersion) -> Result<DensityHistogram> {
    let mut bins: Vec<DensityBin> = LandmarkName::ALL
        .iter()
        .map(|&landmark| DensityBin {
            landmark,
            pristine: 0,
            manipulated: 0,
        })
        .collect();
    for p in &model.prototypes {
        let src = p.source.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("prototype {} has not been projected", p.id))
        })?;
        let bin = &mut bins[src.landmarks.nearest(&src.bbox.center()).index()];
        match p.class {
            Label::Pristine => bin.pristine += 1,
            Label::Manipulated => bin.manipulated += 1,
        }
    }
    Ok(DensityHistogram { bins })
}

pub const RADAR_AXES: [&str; 8] = [
    "prototype_count",
    "accuracy",
    "auc",
    "cross_entropy",
    "cluster",
    "separation",
    "diversity",
    "l1",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarValue {
    pub value: f64,
    /// Percent of the initial model's value, or the raw value when `absolute`.
    pub percent: f64,
    /// The initial value is 0, so no percentage exists.
    pub absolute: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarSeries {
    pub axes: Vec<String>,
    pub initial: Vec<RadarValue>,
    pub current: Vec<RadarValue>,
    pub candidate: Vec<RadarValue>,
    /// Candidate relative to current, in percent; `None` where current is 0.
    pub deltas: Vec<Option<f64>>,
}

fn radar_values(r: &MetricsReport) -> [f64; 8] {
    [
        r.prototype_count as f64,
        r.accuracy,
        r.auc,
        r.loss.cross_entropy,
        r.loss.cluster,
        r.loss.separation,
        r.loss.diversity,
        r.loss.l1,
    ]
}

pub fn radar_data(
    initial: &MetricsReport,
    current: &MetricsReport,
    candidate: &MetricsReport,
) -> Result<RadarSeries> {
    if initial.n_samples != current.n_samples || initial.n_samples != candidate.n_samples {
        return Err(Error::InvalidArgument(format!(
            "radar reports cover different sample sets ({}, {}, {})",
            initial.n_samples, current.n_samples, candidate.n_samples
        )));
    }
    let base = radar_values(initial);
    let series = |r: &MetricsReport| {
        radar_values(r)
            .iter()
            .zip(&base)
            .map(|(&value, &b)| {
                if b == 0.0 {
                    RadarValue {
                        value,
                        percent: value,
                        absolute: true,
                    }
                } else {
                    RadarValue {
                        value,
                        percent: value / b * 100.0,
                        absolute: false,
                    }
                }
            })
            .collect::<Vec<_>>()
    };
    let deltas = radar_values(current)
        .iter()
        .zip(radar_values(candidate))
        .map(|(&c, n)| (c != 0.0).then(|| (n - c) / c * 100.0))
        .collect();
    Ok(RadarSeries {
        axes: RADAR_AXES.iter().map(|s| s.to_string()).collect(),
        initial: series(initial),
        current: series(current),
        candidate: series(candidate),
        deltas,
    })
}
