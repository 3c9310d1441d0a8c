//! Prototype deletion, replacement and addition with exact last-layer retraining
//! from cached activations, plus the dry-run / commit version workflow.
//!
//! Deletion drops maxsim columns and refits the class layer; it never reads a
//! latent map. Replacement and addition compute one new maxsim column from the
//! cached latent maps, then refit. Dry runs take `&self`; only
//! [`RefinementSession::commit`] and [`RefinementSession::checkout`] mutate.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::datagen::{Label, Split};
use crate::encoder::encode_calls;
use crate::error::{Error, Result};
use crate::explain::{landmark_density, radar_data, DensityHistogram, RadarSeries};
use crate::metrics::{evaluate, MetricsReport};
use crate::numerics::{distance_evaluations, squared_distance};
use crate::protonet::{
    optimize_last_layer, prototype_activation, ClassLayer, LastLayerFit, ModelVersion, Prototype,
    PrototypeId, PrototypeSource,
};
use crate::store::VersionStore;

/// One training patch that can become a prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub source: PrototypeSource,
    pub label: Label,
    pub vector: Vec<f32>,
}

/// Every cell of every training latent map, in cache order then row-major.
#[derive(Debug, Clone)]
pub struct PatchIndex {
    entries: Vec<PatchEntry>,
    lookup: HashMap<(String, (usize, usize)), usize>,
}

impl PatchIndex {
    pub fn build(train: &ActivationCache) -> Self {
        let mut entries = Vec::new();
        for s in &train.samples {
            for h in 0..s.latent.rows() {
                for w in 0..s.latent.cols() {
                    entries.push(PatchEntry {
                        source: PrototypeSource::new(&s.meta, &s.latent, h, w),
                        label: s.meta.label,
                        vector: s.latent.patch(h, w).to_vec(),
                    });
                }
            }
        }
        let lookup = entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.source.sample_id.clone(), e.source.cell), i))
            .collect();
        Self { entries, lookup }
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: &CandidateRef) -> Result<&PatchEntry> {
        self.lookup
            .get(&(r.sample_id.clone(), r.cell))
            .map(|&i| &self.entries[i])
            .ok_or_else(|| {
                Error::NotFound(format!("training patch {} at {:?}", r.sample_id, r.cell))
            })
    }
}

/// Names a patch of the index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidateRef {
    pub sample_id: String,
    pub cell: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub source: PrototypeSource,
    pub label: Label,
    /// Squared latent distance to the queried prototype.
    pub distance: f64,
}

impl Candidate {
    pub fn reference(&self) -> CandidateRef {
        CandidateRef {
            sample_id: self.source.sample_id.clone(),
            cell: self.source.cell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RefinementOp {
    Delete {
        ids: Vec<PrototypeId>,
    },
    Replace {
        id: PrototypeId,
        candidate: CandidateRef,
    },
    /// Appends a zero-weight prototype from a candidate patch; runs on the replacement path.
    Add {
        candidate: CandidateRef,
    },
}

impl RefinementOp {
    pub fn describe(&self) -> String {
        match self {
            RefinementOp::Delete { ids } => {
                format!(
                    "deleted {}",
                    ids.iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                )
            }
            RefinementOp::Replace { id, candidate } => {
                format!(
                    "replaced {id} with {}@{},{}",
                    candidate.sample_id, candidate.cell.0, candidate.cell.1
                )
            }
            RefinementOp::Add { candidate } => {
                format!(
                    "added {}@{},{}",
                    candidate.sample_id, candidate.cell.0, candidate.cell.1
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub gradient_norm: f64,
}

impl From<&LastLayerFit> for FitSummary {
    fn from(f: &LastLayerFit) -> Self {
        Self {
            iterations: f.iterations,
            converged: f.converged,
            objective: f.objective,
            gradient_norm: f.gradient_norm,
        }
    }
}

/// Outcome of a dry run. Commit it with the session that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct ImpactReport {
    /// Staleness token of the session state the dry run was computed against.
    pub token: String,
    pub base_version: String,
    pub op: RefinementOp,
    pub candidate: ModelVersion,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub radar: RadarSeries,
    pub density_before: DensityHistogram,
    pub density_after: DensityHistogram,
    pub fit: FitSummary,
    /// Wall-clock time of retraining and evaluation.
    pub elapsed_ms: f64,
    #[serde(skip)]
    pub train_cache: ActivationCache,
    #[serde(skip)]
    pub test_cache: ActivationCache,
}

/// A model version tree with the caches of the current version.
#[derive(Debug)]
pub struct RefinementSession {
    versions: Vec<ModelVersion>,
    current: usize,
    train: ActivationCache,
    test: ActivationCache,
    index: PatchIndex,
    initial_metrics: MetricsReport,
    current_metrics: MetricsReport,
    generation: u64,
    store: Option<VersionStore>,
}

impl RefinementSession {
    /// Session rooted at `initial`, whose caches must be aligned to it.
    pub fn new(
        initial: ModelVersion,
        train: ActivationCache,
        test: ActivationCache,
    ) -> Result<Self> {
        Self::from_versions(vec![initial], 0, train, test, None)
    }

    /// Session over every version of a store, positioned at its head.
    pub fn open(store: VersionStore) -> Result<Self> {
        let lineage = store.lineage()?;
        let versions = lineage
            .versions
            .iter()
            .map(|v| store.load(&v.id))
            .collect::<Result<Vec<_>>>()?;
        let current = versions
            .iter()
            .position(|v| v.id == lineage.head)
            .expect("store validated its head");
        let (train, test) = store.load_caches(&versions[current])?;
        Self::from_versions(versions, current, train, test, Some(store))
    }

    fn from_versions(
        versions: Vec<ModelVersion>,
        current: usize,
        train: ActivationCache,
        test: ActivationCache,
        store: Option<VersionStore>,
    ) -> Result<Self> {
        let model = &versions[current];
        model.validate()?;
        if train.split != Split::Train || test.split != Split::Test {
            return Err(Error::InvalidArgument(
                "session needs a train cache and a test cache".into(),
            ));
        }
        train.verify(model)?;
        test.verify(model)?;
        let current_metrics = evaluate(model, &test)?;
        let initial_metrics = if current == 0 {
            current_metrics.clone()
        } else {
            evaluate(
                &versions[0],
                &ActivationCache::build(&versions[0], Split::Test, &test.encoded())?,
            )?
        };
        Ok(Self {
            index: PatchIndex::build(&train),
            versions,
            current,
            train,
            test,
            initial_metrics,
            current_metrics,
            generation: 0,
            store,
        })
    }

    pub fn current(&self) -> &ModelVersion {
        &self.versions[self.current]
    }

    pub fn initial(&self) -> &ModelVersion {
        &self.versions[0]
    }

    pub fn versions(&self) -> &[ModelVersion] {
        &self.versions
    }

    pub fn version(&self, id: &str) -> Result<&ModelVersion> {
        self.versions
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::NotFound(format!("model version {id}")))
    }

    pub fn metrics(&self) -> &MetricsReport {
        &self.current_metrics
    }

    pub fn initial_metrics(&self) -> &MetricsReport {
        &self.initial_metrics
    }

    pub fn train_cache(&self) -> &ActivationCache {
        &self.train
    }

    pub fn test_cache(&self) -> &ActivationCache {
        &self.test
    }

    pub fn patch_index(&self) -> &PatchIndex {
        &self.index
    }

    pub fn store(&self) -> Option<&VersionStore> {
        self.store.as_ref()
    }

    /// Changes whenever the session advances; reports carry the token they were made under.
    pub fn token(&self) -> String {
        format!("{}#{}", self.current().id, self.generation)
    }

    /// Test metrics of any version. Versions other than the current one are
    /// re-scored from the cached test latent maps.
    pub fn evaluate_version(&self, id: &str) -> Result<MetricsReport> {
        let v = self.version(id)?;
        if v.id == self.current().id {
            return Ok(self.current_metrics.clone());
        }
        evaluate(
            v,
            &ActivationCache::build(v, Split::Test, &self.test.encoded())?,
        )
    }

    /// Caches of any version: the current ones, or rebuilt from the cached latent maps.
    pub fn caches_for(&self, id: &str) -> Result<(ActivationCache, ActivationCache)> {
        let v = self.version(id)?;
        if v.id == self.current().id {
            return Ok((self.train.clone(), self.test.clone()));
        }
        Ok((
            ActivationCache::build(v, Split::Train, &self.train.encoded())?,
            ActivationCache::build(v, Split::Test, &self.test.encoded())?,
        ))
    }

    fn next_version_id(&self) -> String {
        format!("v{}", self.versions.len())
    }

    /// Same-class patches nearest to a prototype of the current version.
    pub fn candidates_near(&self, id: PrototypeId, count: usize) -> Result<Vec<Candidate>> {
        rank_candidates(self.current(), &self.index, id, count)
    }

    /// Evaluates `op` without changing the session.
    pub fn dry_run(&self, op: &RefinementOp) -> Result<ImpactReport> {
        let start = Instant::now();
        let (candidate, train, test, fit) = match op {
            RefinementOp::Delete { ids } => self.delete_fast(ids)?,
            RefinementOp::Replace { id, candidate } => {
                let j = self.current().index_of(*id).ok_or_else(|| {
                    Error::NotFound(format!("prototype {id} in model {}", self.current().id))
                })?;
                self.replace_fast(Some(j), candidate)?
            }
            RefinementOp::Add { candidate } => self.replace_fast(None, candidate)?,
        };
        let after = evaluate(&candidate, &test)?;
        let radar = radar_data(&self.initial_metrics, &self.current_metrics, &after)?;
        let density_before = landmark_density(self.current())?;
        let density_after = landmark_density(&candidate)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(ImpactReport {
            token: self.token(),
            base_version: self.current().id.clone(),
            op: op.clone(),
            candidate,
            before: self.current_metrics.clone(),
            after,
            radar,
            density_before,
            density_after,
            fit: FitSummary::from(&fit),
            elapsed_ms,
            train_cache: train,
            test_cache: test,
        })
    }

    fn derived(&self, note: String) -> ModelVersion {
        let mut m = self.current().clone();
        m.id = self.next_version_id();
        m.parent_id = Some(self.current().id.clone());
        m.note = note;
        m
    }

    fn delete_fast(
        &self,
        ids: &[PrototypeId],
    ) -> Result<(ModelVersion, ActivationCache, ActivationCache, LastLayerFit)> {
        let model = self.current();
        if ids.is_empty() {
            return Err(Error::Refinement(
                "delete needs at least one prototype id".into(),
            ));
        }
        let mut drop = BTreeSet::new();
        for id in ids {
            let j = model
                .index_of(*id)
                .ok_or_else(|| Error::NotFound(format!("prototype {id} in model {}", model.id)))?;
            if !drop.insert(j) {
                return Err(Error::Refinement(format!("prototype {id} listed twice")));
            }
        }
        let keep: Vec<usize> = (0..model.prototypes.len())
            .filter(|j| !drop.contains(j))
            .collect();
        for class in Label::ALL {
            if !keep.iter().any(|&j| model.prototypes[j].class == class) {
                return Err(Error::Refinement(format!(
                    "deleting {} would leave no {class} prototype",
                    ids_text(ids)
                )));
            }
        }
        let mut cand = self.derived(RefinementOp::Delete { ids: ids.to_vec() }.describe());
        cand.prototypes = keep.iter().map(|&j| model.prototypes[j].clone()).collect();
        cand.class_layer = ClassLayer {
            weights: keep.iter().map(|&j| model.class_layer.weights[j]).collect(),
        };
        let train = self.train.select_columns(&keep, &cand)?;
        let test = self.test.select_columns(&keep, &cand)?;
        let fit = refit(&mut cand, &train)?;
        Ok((cand, train, test, fit))
    }

    /// Replaces prototype `slot`, or appends one when `slot` is `None`.
    fn replace_fast(
        &self,
        slot: Option<usize>,
        r: &CandidateRef,
    ) -> Result<(ModelVersion, ActivationCache, ActivationCache, LastLayerFit)> {
        let model = self.current();
        let entry = self.index.get(r)?;
        let owner = model.prototypes.iter().position(|p| {
            p.source
                .as_ref()
                .is_some_and(|s| s.sample_id == r.sample_id && s.cell == r.cell)
        });
        if owner.is_some() && owner != slot {
            return Err(Error::Refinement(format!(
                "patch {}@{:?} already backs another prototype",
                r.sample_id, r.cell
            )));
        }
        let (note, class) = match slot {
            Some(j) => {
                let p = &model.prototypes[j];
                if p.class != entry.label {
                    return Err(Error::Refinement(format!(
                        "candidate is {} but prototype {} is {}",
                        entry.label, p.id, p.class
                    )));
                }
                (
                    RefinementOp::Replace {
                        id: p.id,
                        candidate: r.clone(),
                    }
                    .describe(),
                    p.class,
                )
            }
            None => (
                RefinementOp::Add {
                    candidate: r.clone(),
                }
                .describe(),
                entry.label,
            ),
        };
        let mut cand = self.derived(note);
        let proto = Prototype {
            id: slot.map_or_else(|| model.next_prototype_id(), |j| model.prototypes[j].id),
            class,
            vector: entry.vector.clone(),
            source: Some(entry.source.clone()),
        };
        let j = match slot {
            Some(j) => {
                cand.prototypes[j] = proto;
                j
            }
            None => {
                cand.prototypes.push(proto);
                cand.class_layer.weights.push([0.0, 0.0]);
                model.prototypes.len()
            }
        };
        let column = |cache: &ActivationCache| -> Result<Vec<f32>> {
            cache
                .samples
                .par_iter()
                .map(|s| {
                    prototype_activation(&s.latent, &entry.vector, &model.similarity).map(|a| a.0)
                })
                .collect()
        };
        let train = self.train.with_column(j, &column(&self.train)?, &cand)?;
        let test = self.test.with_column(j, &column(&self.test)?, &cand)?;
        let fit = refit(&mut cand, &train)?;
        Ok((cand, train, test, fit))
    }

    /// Adopts a dry-run report as the new current version.
    pub fn commit(&mut self, report: ImpactReport) -> Result<String> {
        let token = self.token();
        if report.token != token {
            return Err(Error::StaleReport(format!(
                "report was computed against {}, session is at {token}",
                report.token
            )));
        }
        let model = report.candidate;
        if let Some(store) = &self.store {
            store.save(&model, &report.train_cache, &report.test_cache)?;
        }
        let id = model.id.clone();
        self.versions.push(model);
        self.current = self.versions.len() - 1;
        self.train = report.train_cache;
        self.test = report.test_cache;
        self.current_metrics = report.after;
        self.generation += 1;
        Ok(id)
    }

    /// Dry run, committed immediately unless `dry_run` is set.
    pub fn apply(&mut self, op: &RefinementOp, dry_run: bool) -> Result<ImpactReport> {
        let report = self.dry_run(op)?;
        if !dry_run {
            self.commit(report.clone())?;
        }
        Ok(report)
    }

    pub fn delete_prototypes(
        &mut self,
        ids: &[PrototypeId],
        dry_run: bool,
    ) -> Result<ImpactReport> {
        self.apply(&RefinementOp::Delete { ids: ids.to_vec() }, dry_run)
    }

    pub fn replace_prototype(
        &mut self,
        id: PrototypeId,
        candidate: &CandidateRef,
        dry_run: bool,
    ) -> Result<ImpactReport> {
        self.apply(
            &RefinementOp::Replace {
                id,
                candidate: candidate.clone(),
            },
            dry_run,
        )
    }

    pub fn add_prototype(
        &mut self,
        candidate: &CandidateRef,
        dry_run: bool,
    ) -> Result<ImpactReport> {
        self.apply(
            &RefinementOp::Add {
                candidate: candidate.clone(),
            },
            dry_run,
        )
    }

    /// Moves the session to an existing version; later commits branch from there.
    pub fn checkout(&mut self, id: &str) -> Result<()> {
        let idx = self
            .versions
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::NotFound(format!("version {id}")))?;
        if idx == self.current {
            return Ok(());
        }
        let (train, test) = self.caches_for(id)?;
        self.current_metrics = evaluate(&self.versions[idx], &test)?;
        self.current = idx;
        self.train = train;
        self.test = test;
        self.generation += 1;
        if let Some(store) = &self.store {
            store.set_head(id)?;
        }
        Ok(())
    }
}

/// Same-class patches nearest to prototype `id` of `model`, excluding patches that
/// already back one of its prototypes. Ties keep index order, which is `(sample, h, w)`.
pub fn rank_candidates(
    model: &ModelVersion,
    index: &PatchIndex,
    id: PrototypeId,
    count: usize,
) -> Result<Vec<Candidate>> {
    let proto = model.prototype(id)?;
    let taken: BTreeSet<(&str, (usize, usize))> = model
        .prototypes
        .iter()
        .filter_map(|p| p.source.as_ref().map(|s| (s.sample_id.as_str(), s.cell)))
        .collect();
    let mut scored: Vec<(f64, &PatchEntry)> = index
        .entries
        .iter()
        .filter(|e| {
            e.label == proto.class && !taken.contains(&(e.source.sample_id.as_str(), e.source.cell))
        })
        .map(|e| (squared_distance(&e.vector, &proto.vector), e))
        .collect();
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            (a.1.source.sample_id.as_str(), a.1.source.cell)
                .cmp(&(b.1.source.sample_id.as_str(), b.1.source.cell))
        })
    });
    Ok(scored
        .into_iter()
        .take(count)
        .map(|(distance, e)| Candidate {
            source: e.source.clone(),
            label: e.label,
            distance,
        })
        .collect())
}

fn ids_text(ids: &[PrototypeId]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Encoder calls and distance-map evaluations made by one piece of work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WorkCounts {
    pub encodes: u64,
    pub distance_maps: u64,
}

/// Runs `f` on a one-thread pool and reads the thread-local counters on that
/// thread, so the count covers all of its work, including parallel iterators.
pub fn count_work<T: Send>(f: impl FnOnce() -> T + Send) -> (T, WorkCounts) {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("one-thread pool");
    pool.install(|| {
        let (e0, d0) = (encode_calls(), distance_evaluations());
        let out = f();
        (
            out,
            WorkCounts {
                encodes: encode_calls() - e0,
                distance_maps: distance_evaluations() - d0,
            },
        )
    })
}

/// Refits the class layer of `model` on a train cache aligned to it, warm-started
/// from the model's own weights.
pub fn refit(model: &mut ModelVersion, train: &ActivationCache) -> Result<LastLayerFit> {
    let fit = optimize_last_layer(
        &train.matrix(),
        &model.classes(),
        &model.train_config.last_layer(),
        &model.class_layer,
    )?;
    model.class_layer = fit.layer.clone();
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DataConfig, Dataset};
    use crate::encoder::{encode, EncoderConfig};
    use crate::numerics::SimilarityConfig;
    use crate::protonet::{
        encode_all, forward, maxsim_matrix, project_prototypes, EncodedSample, TrainConfig,
    };

    struct Fixture {
        data: Dataset,
        session: RefinementSession,
    }

    fn fixture(seed: u64) -> Fixture {
        let data = generate(&DataConfig {
            train_samples: 24,
            test_samples: 12,
            seed,
            ..Default::default()
        })
        .unwrap();
        let enc = EncoderConfig::default();
        let tr = encode_all(&data.train, &enc).unwrap();
        let te = encode_all(&data.test, &enc).unwrap();
        let cfg = TrainConfig {
            protos_per_class: 3,
            seed,
            ..TrainConfig::default()
        };
        let m = ModelVersion::initial(enc, SimilarityConfig::default(), cfg, &tr).unwrap();
        let mut m = project_prototypes(&m, &tr).unwrap();
        let a = ActivationCache::build(&m, Split::Train, &tr).unwrap();
        refit(&mut m, &a).unwrap();
        let a = ActivationCache::build(&m, Split::Train, &tr).unwrap();
        let b = ActivationCache::build(&m, Split::Test, &te).unwrap();
        Fixture {
            data,
            session: RefinementSession::new(m, a, b).unwrap(),
        }
    }

    /// Re-encodes everything from the raw sequences and retrains from the same starting weights.
    fn full_recompute(fx: &Fixture, op: &RefinementOp) -> (ClassLayer, Vec<[f64; 2]>) {
        let model = fx.session.current();
        let enc = &model.encoder;
        let fresh = |s: &[crate::datagen::SampleSequence]| -> Vec<EncodedSample> {
            s.iter()
                .map(|x| EncodedSample {
                    meta: x.meta(),
                    latent: encode(x, enc).unwrap(),
                })
                .collect()
        };
        let (tr, te) = (fresh(&fx.data.train), fresh(&fx.data.test));
        let mut m = model.clone();
        match op {
            RefinementOp::Delete { ids } => {
                let keep: Vec<usize> = (0..m.prototypes.len())
                    .filter(|&j| !ids.contains(&m.prototypes[j].id))
                    .collect();
                m.prototypes = keep.iter().map(|&j| model.prototypes[j].clone()).collect();
                m.class_layer.weights =
                    keep.iter().map(|&j| model.class_layer.weights[j]).collect();
            }
            RefinementOp::Replace { candidate, .. } | RefinementOp::Add { candidate } => {
                let s = tr
                    .iter()
                    .find(|s| s.meta.id == candidate.sample_id)
                    .unwrap();
                let v = s.latent.patch(candidate.cell.0, candidate.cell.1).to_vec();
                if let RefinementOp::Replace { id, .. } = op {
                    let j = m.index_of(*id).unwrap();
                    m.prototypes[j].vector = v;
                } else {
                    let mut p = m.prototypes[0].clone();
                    p.id = m.next_prototype_id();
                    p.class = s.meta.label;
                    p.vector = v;
                    m.prototypes.push(p);
                    m.class_layer.weights.push([0.0, 0.0]);
                }
            }
        }
        let mm = maxsim_matrix(&m, &tr).unwrap();
        let fit = optimize_last_layer(
            &mm,
            &m.classes(),
            &m.train_config.last_layer(),
            &m.class_layer,
        )
        .unwrap();
        m.class_layer = fit.layer;
        let probs = te
            .iter()
            .map(|s| forward(&m, &s.latent).unwrap().probs)
            .collect();
        (m.class_layer, probs)
    }

    fn max_weight_gap(a: &ClassLayer, b: &ClassLayer) -> f64 {
        assert_eq!(a.weights.len(), b.weights.len());
        a.weights
            .iter()
            .flatten()
            .zip(b.weights.iter().flatten())
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .fold(0.0, f64::max)
    }

    fn check_against_oracle(fx: &Fixture, op: &RefinementOp) -> ImpactReport {
        let report = fx.session.dry_run(op).unwrap();
        let (layer, probs) = full_recompute(fx, op);
        assert!(
            max_weight_gap(&report.candidate.class_layer, &layer) <= 1e-6,
            "{op:?}"
        );
        let labels = report.test_cache.labels();
        let (c, _) =
            crate::metrics::confusion_matrix(&probs, &labels, crate::metrics::DEFAULT_THRESHOLD)
                .unwrap();
        assert_eq!(report.after.confusion, c, "{op:?}");
        report
    }

    #[test]
    fn delete_matches_full_recompute_without_encoding() {
        let fx = fixture(3);
        let ids = fx.session.current().prototype_ids();
        for del in [vec![ids[0]], vec![ids[1], ids[4]], vec![ids[2], ids[3]]] {
            let op = RefinementOp::Delete { ids: del };
            let (r, work) = count_work(|| fx.session.dry_run(&op));
            let r = r.unwrap();
            assert_eq!(work, WorkCounts::default());
            assert_eq!(
                r.candidate.prototypes.len(),
                ids.len()
                    - match &op {
                        RefinementOp::Delete { ids } => ids.len(),
                        _ => 0,
                    }
            );
            check_against_oracle(&fx, &op);
        }
    }

    #[test]
    fn replace_and_add_match_full_recompute() {
        let fx = fixture(4);
        let model = fx.session.current();
        for &id in &model.prototype_ids()[..3] {
            let cand = fx.session.candidates_near(id, 2).unwrap();
            let op = RefinementOp::Replace {
                id,
                candidate: cand[1].reference(),
            };
            let (r, work) = count_work(|| fx.session.dry_run(&op));
            let r = r.unwrap();
            assert_eq!(
                work,
                WorkCounts {
                    encodes: 0,
                    distance_maps: 36
                }
            );
            let j = r.candidate.index_of(id).unwrap();
            let entry = fx.session.patch_index().get(&cand[1].reference()).unwrap();
            assert_eq!(r.candidate.prototypes[j].vector, entry.vector);
            assert_eq!(
                r.candidate.prototypes[j].source.as_ref(),
                Some(&entry.source)
            );
            check_against_oracle(&fx, &op);
        }
        let cand = fx
            .session
            .candidates_near(model.prototype_ids()[4], 1)
            .unwrap();
        let op = RefinementOp::Add {
            candidate: cand[0].reference(),
        };
        let r = check_against_oracle(&fx, &op);
        assert_eq!(r.candidate.prototypes.len(), model.prototypes.len() + 1);
        assert_eq!(
            r.candidate.prototypes.last().unwrap().id,
            model.next_prototype_id()
        );
    }

    #[test]
    fn self_replacement_is_a_no_op() {
        let fx = fixture(5);
        let model = fx.session.current();
        for p in &model.prototypes {
            let s = p.source.as_ref().unwrap();
            let op = RefinementOp::Replace {
                id: p.id,
                candidate: CandidateRef {
                    sample_id: s.sample_id.clone(),
                    cell: s.cell,
                },
            };
            let r = fx.session.dry_run(&op).unwrap();
            let j = model.index_of(p.id).unwrap();
            for (a, b) in r
                .train_cache
                .samples
                .iter()
                .zip(&fx.session.train_cache().samples)
            {
                assert_eq!(a.maxsims[j], b.maxsims[j]);
            }
            assert!(max_weight_gap(&r.candidate.class_layer, &model.class_layer) <= 1e-6);
        }
    }

    #[test]
    fn deleting_a_zero_weight_prototype_changes_nothing() {
        let fx = fixture(6);
        let base = fx.session.current();
        // The base weights are optimal, so a zero column appended to them is optimal too.
        let extra = fx
            .session
            .candidates_near(base.prototype_ids()[0], 1)
            .unwrap()
            .remove(0);
        let entry = fx.session.patch_index().get(&extra.reference()).unwrap();
        let mut m = base.clone();
        m.prototypes.push(Prototype {
            id: base.next_prototype_id(),
            class: entry.label,
            vector: entry.vector.clone(),
            source: Some(entry.source.clone()),
        });
        m.class_layer.weights.push([0.0, 0.0]);
        let tr =
            ActivationCache::build(&m, Split::Train, &fx.session.train_cache().encoded()).unwrap();
        let te =
            ActivationCache::build(&m, Split::Test, &fx.session.test_cache().encoded()).unwrap();
        let session = RefinementSession::new(m.clone(), tr, te.clone()).unwrap();
        let before = session.metrics().clone();
        let r = session
            .dry_run(&RefinementOp::Delete {
                ids: vec![m.prototypes.last().unwrap().id],
            })
            .unwrap();
        for (a, b) in te.samples.iter().zip(&r.test_cache.samples) {
            let la = m.class_layer.logits(&a.maxsims);
            let lb = r.candidate.class_layer.logits(&b.maxsims);
            assert!((la[0] - lb[0]).abs() <= 1e-6 && (la[1] - lb[1]).abs() <= 1e-6);
        }
        assert_eq!(r.after.accuracy, before.accuracy);
        assert_eq!(r.after.auc, before.auc);
    }

    #[test]
    fn invalid_ops_are_rejected() {
        let fx = fixture(7);
        let m = fx.session.current();
        let ids = m.prototype_ids();
        let of = |c: Label| {
            ids.iter()
                .copied()
                .filter(|&i| m.prototype(i).unwrap().class == c)
                .collect::<Vec<_>>()
        };
        let cases = [
            RefinementOp::Delete { ids: vec![] },
            RefinementOp::Delete {
                ids: vec![PrototypeId(999)],
            },
            RefinementOp::Delete {
                ids: vec![ids[0], ids[0]],
            },
            RefinementOp::Delete {
                ids: of(Label::Pristine),
            },
        ];
        for op in &cases {
            assert!(fx.session.dry_run(op).is_err(), "{op:?}");
        }
        let pristine = of(Label::Pristine)[0];
        let manip = fx
            .session
            .candidates_near(of(Label::Manipulated)[0], 1)
            .unwrap()
            .remove(0);
        assert!(matches!(
            fx.session.dry_run(&RefinementOp::Replace {
                id: pristine,
                candidate: manip.reference()
            }),
            Err(Error::Refinement(_))
        ));
        let other = m
            .prototype(of(Label::Pristine)[1])
            .unwrap()
            .source
            .clone()
            .unwrap();
        let dup = CandidateRef {
            sample_id: other.sample_id,
            cell: other.cell,
        };
        assert!(fx
            .session
            .dry_run(&RefinementOp::Replace {
                id: pristine,
                candidate: dup
            })
            .is_err());
        let missing = CandidateRef {
            sample_id: "nope".into(),
            cell: (0, 0),
        };
        assert!(matches!(
            fx.session
                .dry_run(&RefinementOp::Add { candidate: missing }),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn candidates_are_ranked_by_exhaustive_scan() {
        let fx = fixture(8);
        let m = fx.session.current();
        for p in &m.prototypes {
            let got = fx.session.candidates_near(p.id, 3).unwrap();
            assert_eq!(got.len(), 3);
            let src = p.source.as_ref().unwrap();
            assert!(got
                .iter()
                .all(|c| !(c.source.sample_id == src.sample_id && c.source.cell == src.cell)));
            assert!(got.iter().all(|c| c.label == p.class));
            let mut best = f64::INFINITY;
            for s in &fx.session.train_cache().samples {
                if s.meta.label != p.class {
                    continue;
                }
                for h in 0..s.latent.rows() {
                    for w in 0..s.latent.cols() {
                        let taken = m.prototypes.iter().any(|q| {
                            q.source
                                .as_ref()
                                .is_some_and(|x| x.sample_id == s.meta.id && x.cell == (h, w))
                        });
                        if !taken {
                            let d: f64 = s
                                .latent
                                .patch(h, w)
                                .iter()
                                .zip(&p.vector)
                                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                                .sum();
                            best = best.min(d);
                        }
                    }
                }
            }
            assert!((got[0].distance - best).abs() <= 1e-9 * best.max(1.0));
            assert!(got.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
        assert!(fx.session.candidates_near(PrototypeId(999), 3).is_err());
    }

    #[test]
    fn dry_run_is_read_only_and_commits_chain() {
        let mut fx = fixture(9);
        let initial = fx.session.current().clone();
        let initial_metrics = fx.session.metrics().clone();
        for k in 1..=5 {
            let m = fx.session.current().clone();
            let id = m.prototype_ids()[k % 2];
            let cand = fx.session.candidates_near(id, 1).unwrap().remove(0);
            let r = fx
                .session
                .replace_prototype(id, &cand.reference(), true)
                .unwrap();
            assert_eq!(fx.session.current(), &m);
            assert_eq!(&r.before, fx.session.metrics());
            let new_id = fx.session.commit(r.clone()).unwrap();
            assert_eq!(new_id, format!("v{k}"));
            assert_eq!(fx.session.versions().len(), k + 1);
            assert_eq!(
                fx.session.current().parent_id.as_deref(),
                Some(m.id.as_str())
            );
            assert!(matches!(fx.session.commit(r), Err(Error::StaleReport(_))));
        }
        assert_eq!(fx.session.initial(), &initial);
        assert_eq!(fx.session.evaluate_version("v0").unwrap(), initial_metrics);
        fx.session.checkout("v2").unwrap();
        let d = fx
            .session
            .dry_run(&RefinementOp::Delete {
                ids: vec![fx.session.current().prototype_ids()[0]],
            })
            .unwrap();
        assert_eq!(fx.session.commit(d).unwrap(), "v6");
        assert_eq!(fx.session.current().parent_id.as_deref(), Some("v2"));
        assert_eq!(
            fx.session.version("v3").unwrap().parent_id.as_deref(),
            Some("v2")
        );
    }

    #[test]
    fn store_backed_session_persists_commits() {
        let fx = fixture(10);
        let dir = tempfile::tempdir().unwrap();
        let s = &fx.session;
        let store =
            VersionStore::create(dir.path(), s.current(), s.train_cache(), s.test_cache()).unwrap();
        let mut session = RefinementSession::open(store).unwrap();
        let id = session.current().prototype_ids()[0];
        session.delete_prototypes(&[id], false).unwrap();
        let reopened = RefinementSession::open(VersionStore::open(dir.path()).unwrap()).unwrap();
        assert_eq!(reopened.current().id, "v1");
        assert_eq!(reopened.current(), session.current());
        assert_eq!(reopened.metrics(), session.metrics());
        assert_eq!(reopened.initial_metrics(), session.initial_metrics());
    }
}
