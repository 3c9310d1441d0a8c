//! File-level workflows shared by the command line and the HTTP service:
//! train into a version store, evaluate, run refinement plans, trace videos
//! and render prototypes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::datagen::{Dataset, DatasetManifest, SampleSequence, Split};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::explain::{prp_map, PrpConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::numerics::SimilarityConfig;
use crate::protonet::{encode_all, train_from_scratch, EpochLog, ModelVersion, TrainConfig};
use crate::refinery::{RefinementOp, RefinementSession};
use crate::render::{frame_crop, prototype_strip, prp_overlay, save_png, RenderedFile};
use crate::store::{resolve_model, VersionStore};
use crate::video::{predict_video, videos_from_samples, PredictionTrace, VideoRecord};

/// Written next to the version store by [`train_model`].
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(dir)?;
    Ok(Dataset {
        train: manifest.load_split(dir, Split::Train)?,
        test: manifest.load_split(dir, Split::Test)?,
        config: manifest.config,
    })
}

/// Every video of both splits.
pub fn load_videos(dir: &Path) -> Result<Vec<VideoRecord>> {
    let ds = load_dataset(dir)?;
    let mut all = ds.train;
    all.extend(ds.test);
    videos_from_samples(&all)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_id: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub prototype_count: usize,
    pub history: Vec<EpochLog>,
    pub test: MetricsReport,
}

/// Trains from scratch on a dataset directory and creates a version store at `out`.
pub fn train_model(data: &Path, out: &Path, cfg: TrainConfig) -> Result<TrainReport> {
    let ds = load_dataset(data)?;
    let enc = EncoderConfig::default();
    let tr = encode_all(&ds.train, &enc)?;
    let te = encode_all(&ds.test, &enc)?;
    let outcome = train_from_scratch(enc, SimilarityConfig::default(), cfg, &tr, &te)?;
    VersionStore::create(
        out,
        &outcome.model,
        &outcome.train_cache,
        &outcome.test_cache,
    )?;
    let report = TrainReport {
        model_id: outcome.model.id.clone(),
        train_samples: tr.len(),
        test_samples: te.len(),
        prototype_count: outcome.model.prototypes.len(),
        history: outcome.history,
        test: evaluate(&outcome.model, &outcome.test_cache)?,
    };
    write_json(&report, &out.join(TRAIN_REPORT_FILE))?;
    Ok(report)
}

/// Metrics of a model (directory or store head) on the test split of a dataset,
/// encoded afresh.
pub fn evaluate_model(model: &Path, data: &Path) -> Result<MetricsReport> {
    let (m, _) = resolve_model(model)?;
    let ds = load_dataset(data)?;
    let te = encode_all(&ds.test, &m.encoder)?;
    evaluate(&m, &ActivationCache::build(&m, Split::Test, &te)?)
}

/// Ordered operations; a bare JSON array is accepted too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Plan {
    Ops { ops: Vec<RefinementOp> },
    List(Vec<RefinementOp>),
}

impl Plan {
    pub fn ops(&self) -> &[RefinementOp] {
        match self {
            Plan::Ops { ops } | Plan::List(ops) => ops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub op: RefinementOp,
    pub base_version: String,
    pub version: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub accuracy_delta: f64,
    pub auc_before: f64,
    pub auc_after: f64,
    pub auc_delta: f64,
    pub prototype_count: usize,
    pub elapsed_ms: f64,
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| Error::io(from, e))? {
        let entry = entry.map_err(|e| Error::io(from, e))?;
        let (src, dst) = (entry.path(), to.join(entry.file_name()));
        if src.is_dir() {
            copy_dir(&src, &dst)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    Ok(())
}

/// Opens a refinement session on `out`: a copy of the store behind `model`, or a
/// new store rooted at a bare model directory. With no `out` the store is edited in place.
pub fn open_session(model: &Path, out: Option<&Path>) -> Result<RefinementSession> {
    let root = match out {
        None => {
            if !VersionStore::is_store(model) {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a version store; pass an output directory",
                    model.display()
                )));
            }
            model.to_path_buf()
        }
        Some(out)
            if out.exists()
                && fs::read_dir(out)
                    .map_err(|e| Error::io(out, e))?
                    .next()
                    .is_some() =>
        {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty",
                out.display()
            )));
        }
        Some(out) if VersionStore::is_store(model) => {
            copy_dir(model, out)?;
            out.to_path_buf()
        }
        Some(out) => {
            let (m, dir) = resolve_model(model)?;
            let train = ActivationCache::load(&dir.join(crate::store::TRAIN_CACHE_FILE), &m)?;
            let test = ActivationCache::load(&dir.join(crate::store::TEST_CACHE_FILE), &m)?;
            VersionStore::create(out, &m, &train, &test)?;
            out.to_path_buf()
        }
    };
    RefinementSession::open(VersionStore::open(&root)?)
}

/// Dry-runs each operation, reports its impact through `log`, then commits it.
pub fn run_plan(
    session: &mut RefinementSession,
    plan: &Plan,
    mut log: impl FnMut(&PlanStep),
) -> Result<Vec<PlanStep>> {
    let mut steps = Vec::new();
    for op in plan.ops() {
        let report = session.dry_run(op)?;
        let step = PlanStep {
            op: op.clone(),
            base_version: report.base_version.clone(),
            version: report.candidate.id.clone(),
            accuracy_before: report.before.accuracy,
            accuracy_after: report.after.accuracy,
            accuracy_delta: report.after.accuracy - report.before.accuracy,
            auc_before: report.before.auc,
            auc_after: report.after.auc,
            auc_delta: report.after.auc - report.before.auc,
            prototype_count: report.candidate.prototypes.len(),
            elapsed_ms: report.elapsed_ms,
        };
        log(&step);
        session.commit(report)?;
        steps.push(step);
    }
    Ok(steps)
}

pub fn trace_video(model: &Path, data: &Path, video_id: &str) -> Result<PredictionTrace> {
    let (m, _) = resolve_model(model)?;
    let videos = load_videos(data)?;
    let v = videos
        .iter()
        .find(|v| v.id == video_id)
        .ok_or_else(|| Error::NotFound(format!("video {video_id} in {}", data.display())))?;
    predict_video(&m, v)
}

/// Writes, per prototype, a strip of its source crop, one PNG per frame of that
/// crop, and a PRP overlay on its source sample. Returns the files written, in order.
pub fn render_model(
    model: &ModelVersion,
    samples: &[SampleSequence],
    out: &Path,
) -> Result<Vec<RenderedFile>> {
    let mut files = Vec::new();
    let mut emit = |kind: &str, id: String, rel: PathBuf, img: &image::RgbImage| -> Result<()> {
        save_png(img, &out.join(&rel))?;
        files.push(RenderedFile {
            kind: kind.into(),
            prototype_id: id,
            path: rel,
        });
        Ok(())
    };
    for p in &model.prototypes {
        let Some(src) = &p.source else { continue };
        let sample = samples
            .iter()
            .find(|s| s.id == src.sample_id)
            .ok_or_else(|| {
                Error::NotFound(format!("source sample {} of {}", src.sample_id, p.id))
            })?;
        let id = p.id.to_string();
        emit(
            "strip",
            id.clone(),
            PathBuf::from(format!("prototypes/{id}.png")),
            &prototype_strip(p, sample)?,
        )?;
        for t in 0..sample.k() {
            let rel = PathBuf::from(format!("prototypes/{id}/frame{t:02}.png"));
            emit("frame", id.clone(), rel, &frame_crop(sample, &src.bbox, t)?)?;
        }
        let latent = encode(sample, &model.encoder)?;
        let map = prp_map(model, sample, &latent, p.id, &PrpConfig::default())?;
        emit(
            "prp",
            id.clone(),
            PathBuf::from(format!("prp/{id}.png")),
            &prp_overlay(sample, &map)?,
        )?;
    }
    write_json(&files, &out.join("renders.json"))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, DataConfig};

    #[test]
    fn train_refine_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_dataset(
            &DataConfig {
                train_samples: 16,
                test_samples: 8,
                seed: 3,
                ..Default::default()
            },
            &data,
        )
        .unwrap();
        let cfg = TrainConfig {
            protos_per_class: 2,
            epochs: 2,
            ..TrainConfig::default()
        };
        let store = dir.path().join("store");
        let report = train_model(&data, &store, cfg).unwrap();
        assert_eq!(report.prototype_count, 4);
        let eval = evaluate_model(&store, &data).unwrap();
        assert_eq!(eval, report.test);
        assert_eq!(evaluate_model(&store.join("v0"), &data).unwrap(), eval);

        let (m, _) = resolve_model(&store).unwrap();
        let plan: Plan = serde_json::from_str(&format!(
            r#"[{{"kind":"delete","ids":["{}"]}}]"#,
            m.prototypes[0].id
        ))
        .unwrap();
        assert!(open_session(&store, Some(&data)).is_err());
        let out = dir.path().join("refined");
        let mut session = open_session(&store, Some(&out)).unwrap();
        let mut logged = 0;
        let steps = run_plan(&mut session, &plan, |_| logged += 1).unwrap();
        assert_eq!((steps.len(), logged), (1, 1));
        let (head, _) = resolve_model(&out).unwrap();
        assert_eq!(head.id, "v1");
        assert_eq!(head.prototypes.len(), 3);
        assert_eq!(resolve_model(&store).unwrap().0.id, "v0");

        let videos = load_videos(&data).unwrap();
        let trace = trace_video(&out, &data, &videos[0].id).unwrap();
        assert_eq!(trace.model_version, "v1");
        assert!(trace_video(&out, &data, "missing").is_err());

        let ds = load_dataset(&data).unwrap();
        let files = render_model(&head, &ds.train, &dir.path().join("renders")).unwrap();
        assert_eq!(files.len(), 3 * (2 + ds.config.k as usize));
        assert!(files
            .iter()
            .all(|f| dir.path().join("renders").join(&f.path).exists()));
    }
}
