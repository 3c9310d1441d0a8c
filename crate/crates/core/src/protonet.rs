//! Prototype layer, class layer, training loss, projection and the training loop.
//!
//! A model scores a latent map by taking, for every prototype, the best
//! similarity over all cells (the maxsim), then a bias-free linear layer maps
//! maxsims to two class logits.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::datagen::{BBox, Label, Landmarks, SampleMeta, SampleSequence, Split};
use crate::encoder::{encode, EncoderConfig, LatentMap};
use crate::error::{Error, Result};
use crate::numerics::{
    similarity_derivative, similarity_unchecked, softmax2, squared_distance, squared_distances,
    SimilarityConfig,
};

/// Serialized as a number; also read from strings like `"p3"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct PrototypeId(pub u32);

impl<'de> Deserialize<'de> for PrototypeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(PrototypeId(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl fmt::Display for PrototypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl FromStr for PrototypeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s.strip_prefix('p').unwrap_or(s);
        digits
            .parse()
            .map(PrototypeId)
            .map_err(|_| Error::InvalidArgument(format!("bad prototype id {s:?}")))
    }
}

/// The training patch a projected prototype was copied from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSource {
    pub sample_id: String,
    pub cell: (usize, usize),
    pub bbox: BBox,
    /// Inclusive frame range covered by the source sample.
    pub frame_range: (u32, u32),
    pub landmarks: Landmarks,
}

impl PrototypeSource {
    pub fn new(meta: &SampleMeta, latent: &LatentMap, h: usize, w: usize) -> Self {
        Self {
            sample_id: meta.id.clone(),
            cell: (h, w),
            bbox: latent.receptive_field(h, w),
            frame_range: (meta.frame_index, meta.frame_index + meta.k - 1),
            landmarks: meta.landmarks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub id: PrototypeId,
    pub class: Label,
    pub vector: Vec<f32>,
    pub source: Option<PrototypeSource>,
}

/// `P × 2` weights, row `j` holding `[pristine, manipulated]` for prototype `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLayer {
    pub weights: Vec<[f32; 2]>,
}

impl ClassLayer {
    pub fn zeros(p: usize) -> Self {
        Self {
            weights: vec![[0.0; 2]; p],
        }
    }

    /// Own-class weight 1, cross-class weight -0.5.
    pub fn class_identity(classes: &[Label]) -> Self {
        Self {
            weights: classes
                .iter()
                .map(|c| {
                    let mut w = [-0.5; 2];
                    w[c.index()] = 1.0;
                    w
                })
                .collect(),
        }
    }

    /// Per-prototype terms `w[j][c] * s[j]`.
    pub fn contributions(&self, maxsims: &[f32]) -> Vec<[f64; 2]> {
        self.weights
            .iter()
            .zip(maxsims)
            .map(|(w, &s)| [w[0] as f64 * s as f64, w[1] as f64 * s as f64])
            .collect()
    }

    /// Logits as the in-order sum of [`ClassLayer::contributions`].
    pub fn logits(&self, maxsims: &[f32]) -> [f64; 2] {
        sum_contributions(&self.contributions(maxsims))
    }
}

/// Sums contribution rows in order; this is the definition of a logit.
pub fn sum_contributions(rows: &[[f64; 2]]) -> [f64; 2] {
    let mut l = [0.0; 2];
    for r in rows {
        l[0] += r[0];
        l[1] += r[1];
    }
    l
}

/// How prototype vectors are chosen before the first training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeInit {
    /// Independent `U[0, 1)` entries.
    Uniform,
    /// Per class: a seeded random own-class training patch, then repeatedly the
    /// own-class patch farthest from all patches chosen so far.
    FarthestPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_clus: f64,
    pub lambda_sep: f64,
    pub lambda_div: f64,
    pub lambda_l1: f64,
    /// Ridge weight on all class-layer entries during last-layer optimization.
    pub last_layer_l2: f64,
    pub protos_per_class: usize,
    /// Epochs between projection steps.
    pub projection_interval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub proto_lr: f64,
    pub weight_lr: f64,
    pub diversity_margin: f64,
    /// Squared-distance margin `M` in `max(0, M - d)` of the separation term.
    pub separation_margin: f64,
    pub last_layer_tolerance: f64,
    pub last_layer_max_iter: usize,
    pub init: PrototypeInit,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_clus: 0.2,
            lambda_sep: 0.0,
            lambda_div: 0.1,
            lambda_l1: 0.001,
            last_layer_l2: 1e-4,
            protos_per_class: 5,
            projection_interval: 5,
            epochs: 40,
            batch_size: 32,
            proto_lr: 0.05,
            weight_lr: 0.1,
            diversity_margin: 0.3,
            separation_margin: 10.0,
            last_layer_tolerance: 1e-6,
            last_layer_max_iter: 10_000,
            init: PrototypeInit::FarthestPoint,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_clus", self.lambda_clus),
            ("lambda_sep", self.lambda_sep),
            ("lambda_div", self.lambda_div),
            ("lambda_l1", self.lambda_l1),
            ("last_layer_l2", self.last_layer_l2),
            ("separation_margin", self.separation_margin),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.protos_per_class == 0 {
            return Err(Error::Config("protos_per_class must be at least 1".into()));
        }
        if self.projection_interval == 0 {
            return Err(Error::Config(
                "projection_interval must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.proto_lr >= 0.0 && self.weight_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.diversity_margin) {
            return Err(Error::Config(format!(
                "diversity margin must lie in [-1, 1], got {}",
                self.diversity_margin
            )));
        }
        if !(self.last_layer_tolerance > 0.0) || self.last_layer_max_iter == 0 {
            return Err(Error::Config(
                "last-layer tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn last_layer(&self) -> LastLayerConfig {
        LastLayerConfig {
            lambda_l1: self.lambda_l1,
            l2: self.last_layer_l2,
            tolerance: self.last_layer_tolerance,
            max_iter: self.last_layer_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub id: String,
    pub parent_id: Option<String>,
    pub note: String,
    pub encoder: EncoderConfig,
    pub similarity: SimilarityConfig,
    pub prototypes: Vec<Prototype>,
    pub class_layer: ClassLayer,
    pub train_config: TrainConfig,
}

impl ModelVersion {
    /// Untrained model with `U[0, 1)` prototype vectors and class-identity weights.
    pub fn random(
        encoder: EncoderConfig,
        similarity: SimilarityConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        encoder.validate()?;
        similarity.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prototypes = Vec::new();
        for class in Label::ALL {
            for _ in 0..cfg.protos_per_class {
                let vector = (0..encoder.depth).map(|_| rng.random::<f32>()).collect();
                let id = PrototypeId(prototypes.len() as u32);
                prototypes.push(Prototype {
                    id,
                    class,
                    vector,
                    source: None,
                });
            }
        }
        let classes: Vec<Label> = prototypes.iter().map(|p| p.class).collect();
        Ok(Self {
            id: "v0".into(),
            parent_id: None,
            note: "initial".into(),
            encoder,
            similarity,
            class_layer: ClassLayer::class_identity(&classes),
            prototypes,
            train_config: cfg,
        })
    }

    /// Untrained model initialized per `cfg.init`.
    pub fn initial(
        encoder: EncoderConfig,
        similarity: SimilarityConfig,
        cfg: TrainConfig,
        train: &[EncodedSample],
    ) -> Result<Self> {
        let mut model = Self::random(encoder, similarity, cfg)?;
        if model.train_config.init == PrototypeInit::FarthestPoint {
            let mut rng = ChaCha8Rng::seed_from_u64(model.train_config.seed);
            for class in Label::ALL {
                let patches: Vec<&[f32]> = train
                    .iter()
                    .filter(|s| s.meta.label == class)
                    .flat_map(|s| s.latent.grid.data().chunks_exact(model.depth()))
                    .collect();
                if patches.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "no {class} training patches to initialize from"
                    )));
                }
                let slots: Vec<usize> = (0..model.prototypes.len())
                    .filter(|&j| model.prototypes[j].class == class)
                    .collect();
                let mut pick = rng.random_range(0..patches.len());
                let mut gap = vec![f64::INFINITY; patches.len()];
                for j in slots {
                    model.prototypes[j].vector = patches[pick].to_vec();
                    for (g, p) in gap.iter_mut().zip(&patches) {
                        *g = g.min(squared_distance(p, patches[pick]));
                    }
                    pick = (0..gap.len()).fold(0, |b, i| if gap[i] > gap[b] { i } else { b });
                }
            }
        }
        Ok(model)
    }

    pub fn depth(&self) -> usize {
        self.encoder.depth
    }

    pub fn prototype_ids(&self) -> Vec<PrototypeId> {
        self.prototypes.iter().map(|p| p.id).collect()
    }

    pub fn classes(&self) -> Vec<Label> {
        self.prototypes.iter().map(|p| p.class).collect()
    }

    pub fn index_of(&self, id: PrototypeId) -> Option<usize> {
        self.prototypes.iter().position(|p| p.id == id)
    }

    pub fn prototype(&self, id: PrototypeId) -> Result<&Prototype> {
        self.prototypes
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::NotFound(format!("prototype {id} in model {}", self.id)))
    }

    /// Smallest id not used by any prototype.
    pub fn next_prototype_id(&self) -> PrototypeId {
        PrototypeId(
            self.prototypes
                .iter()
                .map(|p| p.id.0 + 1)
                .max()
                .unwrap_or(0),
        )
    }

    pub fn class_count(&self, class: Label) -> usize {
        self.prototypes.iter().filter(|p| p.class == class).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.similarity.validate()?;
        let d = self.depth();
        let mut ids = self.prototype_ids();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "model {} has duplicate prototype ids",
                self.id
            )));
        }
        for p in &self.prototypes {
            if p.vector.len() != d {
                return Err(Error::Shape(format!(
                    "prototype {} has length {}, expected {d}",
                    p.id,
                    p.vector.len()
                )));
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("prototype {} vector", p.id)));
            }
        }
        if self.class_layer.weights.len() != self.prototypes.len() {
            return Err(Error::Shape(format!(
                "class layer has {} rows for {} prototypes",
                self.class_layer.weights.len(),
                self.prototypes.len()
            )));
        }
        if self
            .class_layer
            .weights
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("class layer weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forward {
    pub maxsims: Vec<f32>,
    pub argmax_cells: Vec<(usize, usize)>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

/// Best cell and its squared distance; ties keep the first cell in row-major order.
pub fn nearest_cell(latent: &LatentMap, proto: &[f32]) -> Result<((usize, usize), f64)> {
    let d = squared_distances(&latent.grid, proto)?;
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = i;
        }
    }
    Ok(((best / latent.cols(), best % latent.cols()), d[best]))
}

/// Maxsim of one prototype over a latent map, rounded to storage precision.
pub fn prototype_activation(
    latent: &LatentMap,
    proto: &[f32],
    sim: &SimilarityConfig,
) -> Result<(f32, (usize, usize))> {
    let (cell, d) = nearest_cell(latent, proto)?;
    Ok((similarity_unchecked(d, sim.epsilon) as f32, cell))
}

pub fn forward(model: &ModelVersion, latent: &LatentMap) -> Result<Forward> {
    if latent.depth() != model.depth() {
        return Err(Error::Shape(format!(
            "latent depth {} does not match model depth {}",
            latent.depth(),
            model.depth()
        )));
    }
    let mut maxsims = Vec::with_capacity(model.prototypes.len());
    let mut argmax_cells = Vec::with_capacity(model.prototypes.len());
    for p in &model.prototypes {
        let (s, cell) = prototype_activation(latent, &p.vector, &model.similarity)?;
        maxsims.push(s);
        argmax_cells.push(cell);
    }
    let logits = model.class_layer.logits(&maxsims);
    Ok(Forward {
        probs: softmax2(logits),
        maxsims,
        argmax_cells,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub diversity: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(
        cross_entropy: f64,
        cluster: f64,
        separation: f64,
        diversity: f64,
        l1: f64,
        cfg: &TrainConfig,
    ) -> Self {
        let total = cross_entropy
            + cfg.lambda_clus * cluster
            + cfg.lambda_sep * separation
            + cfg.lambda_div * diversity
            + cfg.lambda_l1 * l1;
        Self {
            cross_entropy,
            cluster,
            separation,
            diversity,
            l1,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.cross_entropy,
            self.cluster,
            self.separation,
            self.diversity,
            self.l1,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `-ln softmax(logits)[y]`, computed stably.
pub fn cross_entropy(logits: [f64; 2], y: Label) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[y.index()]
}

/// Sum of absolute cross-class weights.
pub fn l1_cross(layer: &ClassLayer, classes: &[Label]) -> f64 {
    layer
        .weights
        .iter()
        .zip(classes)
        .map(|(w, c)| w[c.other().index()].abs() as f64)
        .sum()
}

fn norm(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

fn same_class_pairs(prototypes: &[Prototype]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..prototypes.len() {
        for j in i + 1..prototypes.len() {
            if prototypes[i].class == prototypes[j].class {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean over same-class pairs of `max(0, cos(p_i, p_j) - margin)`; zero without pairs.
///
/// A zero vector has no direction and contributes cosine 0.
pub fn diversity_loss(prototypes: &[Prototype], margin: f64) -> f64 {
    diversity_with_grad(prototypes, margin, None)
}

fn diversity_with_grad(
    prototypes: &[Prototype],
    margin: f64,
    mut grad: Option<&mut [Vec<f64>]>,
) -> f64 {
    let pairs = same_class_pairs(prototypes);
    if pairs.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    for (i, j) in pairs {
        let (a, b) = (&prototypes[i].vector, &prototypes[j].vector);
        let (na, nb) = (norm(a), norm(b));
        if na < 1e-12 || nb < 1e-12 {
            total += (0.0 - margin).max(0.0);
            continue;
        }
        let dot: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let cos = dot / (na * nb);
        let hinge = cos - margin;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..a.len() {
                let (ak, bk) = (a[k] as f64, b[k] as f64);
                g[i][k] += scale * (bk / (na * nb) - cos * ak / (na * na));
                g[j][k] += scale * (ak / (na * nb) - cos * bk / (nb * nb));
            }
        }
    }
    total * scale
}

/// Gradient of the total loss with respect to prototype vectors and class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub prototypes: Vec<Vec<f64>>,
    pub weights: Vec<[f64; 2]>,
}

/// Loss over a batch of `(latent, label)` pairs.
pub fn compute_loss(
    model: &ModelVersion,
    batch: &[(&LatentMap, Label)],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    loss_impl(model, batch, cfg, false).map(|(l, _)| l)
}

/// Loss and its gradient. Min and max operators route the gradient through the selected cell only.
pub fn loss_and_gradients(
    model: &ModelVersion,
    batch: &[(&LatentMap, Label)],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    loss_impl(model, batch, cfg, true).map(|(l, g)| (l, g.expect("gradients requested")))
}

fn loss_impl(
    model: &ModelVersion,
    batch: &[(&LatentMap, Label)],
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "loss needs a non-empty batch".into(),
        ));
    }
    let p = model.prototypes.len();
    let d = model.depth();
    let eps = model.similarity.epsilon;
    let classes = model.classes();
    let inv_n = 1.0 / batch.len() as f64;
    let mut gp = vec![vec![0.0; d]; if want_grad { p } else { 0 }];
    let mut gw = vec![[0.0; 2]; if want_grad { p } else { 0 }];
    let (mut ce, mut clus, mut sep) = (0.0, 0.0, 0.0);

    let mut dmin = vec![0.0; p];
    let mut cells = vec![0usize; p];
    let mut sims = vec![0.0; p];
    for (latent, y) in batch {
        if latent.depth() != d {
            return Err(Error::Shape(format!(
                "latent depth {} does not match model depth {d}",
                latent.depth()
            )));
        }
        for (j, proto) in model.prototypes.iter().enumerate() {
            let dist = squared_distances(&latent.grid, &proto.vector)?;
            let mut best = 0;
            for (c, &v) in dist.iter().enumerate() {
                if v < dist[best] {
                    best = c;
                }
            }
            cells[j] = best;
            dmin[j] = dist[best];
            sims[j] = similarity_unchecked(dist[best], eps);
        }
        let mut logits = [0.0; 2];
        for (j, w) in model.class_layer.weights.iter().enumerate() {
            logits[0] += w[0] as f64 * sims[j];
            logits[1] += w[1] as f64 * sims[j];
        }
        ce += cross_entropy(logits, *y);

        let own = (0..p)
            .filter(|&j| classes[j] == *y)
            .min_by(|&a, &b| dmin[a].total_cmp(&dmin[b]));
        let other = (0..p)
            .filter(|&j| classes[j] != *y)
            .min_by(|&a, &b| dmin[a].total_cmp(&dmin[b]));
        if let Some(j) = own {
            clus += dmin[j];
        }
        let sep_active = other.filter(|&j| cfg.separation_margin - dmin[j] > 0.0);
        if let Some(j) = sep_active {
            sep += cfg.separation_margin - dmin[j];
        }

        if !want_grad {
            continue;
        }
        let q = softmax2(logits);
        let mut r = q;
        r[y.index()] -= 1.0;
        // dL/dd_j for every prototype, then chain to the prototype through its selected cell.
        let mut dd = vec![0.0; p];
        for j in 0..p {
            let w = model.class_layer.weights[j];
            gw[j][0] += inv_n * r[0] * sims[j];
            gw[j][1] += inv_n * r[1] * sims[j];
            let ds = r[0] * w[0] as f64 + r[1] * w[1] as f64;
            dd[j] += inv_n * ds * similarity_derivative(dmin[j], &model.similarity);
        }
        if let Some(j) = own {
            dd[j] += inv_n * cfg.lambda_clus;
        }
        if let Some(j) = sep_active {
            dd[j] -= inv_n * cfg.lambda_sep;
        }
        for j in 0..p {
            if dd[j] == 0.0 {
                continue;
            }
            let (h, w) = (cells[j] / latent.cols(), cells[j] % latent.cols());
            let z = latent.patch(h, w);
            for (k, g) in gp[j].iter_mut().enumerate() {
                *g += dd[j] * 2.0 * (model.prototypes[j].vector[k] as f64 - z[k] as f64);
            }
        }
    }

    let div = if want_grad {
        let mut gdiv = vec![vec![0.0; d]; p];
        let v = diversity_with_grad(&model.prototypes, cfg.diversity_margin, Some(&mut gdiv));
        for (g, gd) in gp.iter_mut().zip(&gdiv) {
            for (a, b) in g.iter_mut().zip(gd) {
                *a += cfg.lambda_div * b;
            }
        }
        v
    } else {
        diversity_loss(&model.prototypes, cfg.diversity_margin)
    };
    let l1 = l1_cross(&model.class_layer, &classes);
    if want_grad {
        for (j, c) in classes.iter().enumerate() {
            let k = c.other().index();
            let w = model.class_layer.weights[j][k];
            if w != 0.0 {
                gw[j][k] += cfg.lambda_l1 * w.signum() as f64;
            }
        }
    }
    let loss = LossBreakdown::weighted(ce * inv_n, clus * inv_n, sep * inv_n, div, l1, cfg);
    let grads = want_grad.then_some(Gradients {
        prototypes: gp,
        weights: gw,
    });
    Ok((loss, grads))
}

/// A sample's metadata together with its latent map.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub meta: SampleMeta,
    pub latent: LatentMap,
}

/// Encodes samples in parallel, preserving order.
pub fn encode_all(samples: &[SampleSequence], cfg: &EncoderConfig) -> Result<Vec<EncodedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(EncodedSample {
                meta: s.meta(),
                latent: encode(s, cfg)?,
            })
        })
        .collect()
}

/// Nearest own-class patch for one prototype: `(sample index, h, w, distance)`.
///
/// Ties go to the lexicographically smallest `(sample_id, h, w)`.
pub fn nearest_patch(
    proto: &Prototype,
    samples: &[EncodedSample],
) -> Option<(usize, usize, usize, f64)> {
    let mut best: Option<(usize, usize, usize, f64)> = None;
    for (i, s) in samples.iter().enumerate() {
        if s.meta.label != proto.class {
            continue;
        }
        let lat = &s.latent;
        for h in 0..lat.rows() {
            for w in 0..lat.cols() {
                let d = squared_distance(lat.patch(h, w), &proto.vector);
                let better = match best {
                    None => true,
                    Some((bi, bh, bw, bd)) => {
                        d < bd
                            || (d == bd
                                && (s.meta.id.as_str(), h, w)
                                    < (samples[bi].meta.id.as_str(), bh, bw))
                    }
                };
                if better {
                    best = Some((i, h, w, d));
                }
            }
        }
    }
    best
}

/// Replaces each prototype by its nearest own-class training patch and records the source.
pub fn project_prototypes(model: &ModelVersion, train: &[EncodedSample]) -> Result<ModelVersion> {
    let chosen: Vec<_> = model
        .prototypes
        .par_iter()
        .map(|p| nearest_patch(p, train))
        .collect();
    let mut out = model.clone();
    for (proto, pick) in out.prototypes.iter_mut().zip(chosen) {
        let (i, h, w, _) = pick.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no training samples of class {} to project {} onto",
                proto.class, proto.id
            ))
        })?;
        let s = &train[i];
        proto.vector = s.latent.patch(h, w).to_vec();
        proto.source = Some(PrototypeSource::new(&s.meta, &s.latent, h, w));
    }
    Ok(out)
}

/// Row-major `N × P` maxsims with the label of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxsimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub labels: Vec<Label>,
}

impl MaxsimMatrix {
    pub fn new(cols: usize, rows: Vec<Vec<f32>>, labels: Vec<Label>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} maxsim rows for {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape(format!(
                "maxsim row of length {}, expected {cols}",
                r.len()
            )));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LastLayerConfig {
    pub lambda_l1: f64,
    pub l2: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerFit {
    pub layer: ClassLayer,
    pub objective: f64,
    pub iterations: usize,
    /// Max-norm of the composite gradient mapping at the final step.
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Mean cross-entropy, L1 on cross-class entries and the ridge term, in `f64`.
pub fn last_layer_objective(
    m: &MaxsimMatrix,
    classes: &[Label],
    cfg: &LastLayerConfig,
    layer: &ClassLayer,
) -> f64 {
    let w: Vec<f64> = layer.weights.iter().flatten().map(|&v| v as f64).collect();
    let s: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
    smooth_part(&s, m, &w, cfg.l2, None) + cfg.lambda_l1 * cross_l1(&w, classes)
}

fn cross_l1(w: &[f64], classes: &[Label]) -> f64 {
    classes
        .iter()
        .enumerate()
        .map(|(j, c)| w[j * 2 + c.other().index()].abs())
        .sum()
}

/// Mean CE plus ridge; fills `grad` when given.
fn smooth_part(
    s: &[f64],
    m: &MaxsimMatrix,
    w: &[f64],
    l2: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let p = m.cols;
    let inv_n = 1.0 / m.rows as f64;
    if let Some(g) = grad.as_deref_mut() {
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi = l2 * wi;
        }
    }
    let mut ce = 0.0;
    for i in 0..m.rows {
        let row = &s[i * p..(i + 1) * p];
        let mut l = [0.0; 2];
        for j in 0..p {
            l[0] += row[j] * w[2 * j];
            l[1] += row[j] * w[2 * j + 1];
        }
        let y = m.labels[i];
        ce += cross_entropy(l, y);
        if let Some(g) = grad.as_deref_mut() {
            let q = softmax2(l);
            let mut r = [q[0] * inv_n, q[1] * inv_n];
            r[y.index()] -= inv_n;
            for j in 0..p {
                g[2 * j] += row[j] * r[0];
                g[2 * j + 1] += row[j] * r[1];
            }
        }
    }
    ce * inv_n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>()
}

/// Minimizes the last-layer objective with accelerated proximal gradient (FISTA with
/// adaptive restart). Cross-class entries are soft-thresholded, so the L1 subgradient at 0
/// is taken as 0; the ridge term makes the minimizer unique.
pub fn optimize_last_layer(
    m: &MaxsimMatrix,
    classes: &[Label],
    cfg: &LastLayerConfig,
    init: &ClassLayer,
) -> Result<LastLayerFit> {
    let p = m.cols;
    if classes.len() != p || init.weights.len() != p {
        return Err(Error::Shape(format!(
            "{} maxsim columns, {} prototype classes, {} weight rows",
            p,
            classes.len(),
            init.weights.len()
        )));
    }
    if m.rows < 2 || !Label::ALL.iter().all(|c| m.labels.contains(c)) {
        return Err(Error::InvalidArgument(
            "last-layer optimization needs at least two samples of both labels".into(),
        ));
    }
    if !(cfg.lambda_l1 >= 0.0 && cfg.l2 >= 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config(format!("invalid last-layer config {cfg:?}")));
    }
    let s: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();

    // Lipschitz bound: the two-class CE Hessian in logits has norm <= 1/2, and the Gram
    // matrix norm is bounded by its largest absolute row sum.
    let mut gram = vec![0.0; p * p];
    for i in 0..m.rows {
        let row = &s[i * p..(i + 1) * p];
        for a in 0..p {
            for b in 0..p {
                gram[a * p + b] += row[a] * row[b];
            }
        }
    }
    let row_max = (0..p)
        .map(|a| {
            gram[a * p..(a + 1) * p]
                .iter()
                .map(|v| v.abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let lipschitz = (0.5 * row_max / m.rows as f64 + cfg.l2).max(1e-12);
    let step = 1.0 / lipschitz;
    let threshold = step * cfg.lambda_l1;
    let cross: Vec<bool> = (0..2 * p)
        .map(|i| i % 2 != classes[i / 2].index())
        .collect();

    let mut x: Vec<f64> = init.weights.iter().flatten().map(|&v| v as f64).collect();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0; 2 * p];
    let mut next = vec![0.0; 2 * p];
    let mut gm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        smooth_part(&s, m, &y, cfg.l2, Some(&mut grad));
        for i in 0..2 * p {
            let z = y[i] - step * grad[i];
            next[i] = if cross[i] {
                z.signum() * (z.abs() - threshold).max(0.0)
            } else {
                z
            };
        }
        gm = y
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            * lipschitz;
        if !gm.is_finite() {
            return Err(Error::NonFinite(
                "last-layer optimization produced a non-finite step".into(),
            ));
        }
        if gm < cfg.tolerance {
            x.copy_from_slice(&next);
            converged = true;
            break;
        }
        let restart: f64 = (0..2 * p)
            .map(|i| (y[i] - next[i]) * (next[i] - x[i]))
            .sum();
        if restart > 0.0 {
            t = 1.0;
            y.copy_from_slice(&next);
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            for i in 0..2 * p {
                y[i] = next[i] + beta * (next[i] - x[i]);
            }
            t = t_next;
        }
        x.copy_from_slice(&next);
    }
    let layer = ClassLayer {
        weights: x
            .chunks_exact(2)
            .map(|c| [c[0] as f32, c[1] as f32])
            .collect(),
    };
    let objective = last_layer_objective(m, classes, cfg, &layer);
    Ok(LastLayerFit {
        layer,
        objective,
        iterations,
        gradient_norm: gm,
        converged,
    })
}

/// Maxsim matrix of a model over encoded samples.
pub fn maxsim_matrix(model: &ModelVersion, samples: &[EncodedSample]) -> Result<MaxsimMatrix> {
    let rows = samples
        .par_iter()
        .map(|s| forward(model, &s.latent).map(|f| f.maxsims))
        .collect::<Result<Vec<_>>>()?;
    MaxsimMatrix::new(
        model.prototypes.len(),
        rows,
        samples.iter().map(|s| s.meta.label).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub projected: bool,
    pub last_layer_iterations: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelVersion,
    pub train_cache: ActivationCache,
    pub test_cache: ActivationCache,
    pub history: Vec<EpochLog>,
}

/// Projects prototypes, then refits the class layer with prototypes frozen.
pub fn project_and_refit(
    model: &ModelVersion,
    train: &[EncodedSample],
) -> Result<(ModelVersion, LastLayerFit)> {
    let mut projected = project_prototypes(model, train)?;
    let m = maxsim_matrix(&projected, train)?;
    let fit = optimize_last_layer(
        &m,
        &projected.classes(),
        &projected.train_config.last_layer(),
        &projected.class_layer,
    )?;
    projected.class_layer = fit.layer.clone();
    Ok((projected, fit))
}

/// Builds the initial model from config and training samples, then trains it.
pub fn train_from_scratch(
    encoder: EncoderConfig,
    similarity: SimilarityConfig,
    cfg: TrainConfig,
    train_set: &[EncodedSample],
    test_set: &[EncodedSample],
) -> Result<TrainOutcome> {
    let model0 = ModelVersion::initial(encoder, similarity, cfg, train_set)?;
    train(&model0, train_set, test_set)
}

/// Runs the training loop from `model0`: minibatch gradient steps on prototypes and
/// weights, with projection plus last-layer refit every `projection_interval` epochs and
/// once more at the end if the last epoch was not a projection epoch.
pub fn train(
    model0: &ModelVersion,
    train: &[EncodedSample],
    test: &[EncodedSample],
) -> Result<TrainOutcome> {
    model0.validate()?;
    let cfg = model0.train_config.clone();
    cfg.validate()?;
    for label in Label::ALL {
        if !train.iter().any(|s| s.meta.label == label) {
            return Err(Error::InvalidArgument(format!(
                "training split has no {label} samples"
            )));
        }
    }
    let mut model = model0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut projected_last = false;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&LatentMap, Label)> = chunk
                .iter()
                .map(|&i| (&train[i].latent, train[i].meta.label))
                .collect();
            let (loss, g) = loss_and_gradients(&model, &batch, &cfg)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {loss:?}"),
                });
            }
            for (proto, gp) in model.prototypes.iter_mut().zip(&g.prototypes) {
                for (v, d) in proto.vector.iter_mut().zip(gp) {
                    *v = (*v as f64 - cfg.proto_lr * d) as f32;
                }
            }
            for (w, gw) in model.class_layer.weights.iter_mut().zip(&g.weights) {
                for k in 0..2 {
                    w[k] = (w[k] as f64 - cfg.weight_lr * gw[k]) as f32;
                }
            }
            if model.validate().is_err() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite parameters after step, loss {loss:?}"),
                });
            }
            for (a, b) in [
                (&mut sum.cross_entropy, loss.cross_entropy),
                (&mut sum.cluster, loss.cluster),
                (&mut sum.separation, loss.separation),
                (&mut sum.diversity, loss.diversity),
                (&mut sum.l1, loss.l1),
                (&mut sum.total, loss.total),
            ] {
                *a += b;
            }
            batches += 1;
        }
        let mean = |v: f64| v / batches as f64;
        let loss = LossBreakdown {
            cross_entropy: mean(sum.cross_entropy),
            cluster: mean(sum.cluster),
            separation: mean(sum.separation),
            diversity: mean(sum.diversity),
            l1: mean(sum.l1),
            total: mean(sum.total),
        };
        projected_last = epoch % cfg.projection_interval == 0;
        let mut iters = None;
        if projected_last {
            let (m, fit) = project_and_refit(&model, train)?;
            model = m;
            iters = Some(fit.iterations);
        }
        history.push(EpochLog {
            epoch,
            loss,
            projected: projected_last,
            last_layer_iterations: iters,
        });
    }
    if !projected_last {
        model = project_and_refit(&model, train)?.0;
    }
    let train_cache = ActivationCache::build(&model, Split::Train, train)?;
    let test_cache = ActivationCache::build(&model, Split::Test, test)?;
    Ok(TrainOutcome {
        model,
        train_cache,
        test_cache,
        history,
    })
}
