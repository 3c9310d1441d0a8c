//! Model files and the on-disk version store.
//!
//! A model directory holds `model.json` (configs, prototype metadata, lineage),
//! `prototypes.bin` and `weights.bin`. Both binaries are magic `PFMD`, u16
//! version, u8 kind (1 prototypes, 2 weights), u32 rows, u32 cols, then
//! little-endian f32 rows.
//!
//! A store is a directory with `lineage.json` and one model directory per
//! version, each also holding the train and test activation caches.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u16, put_u32, Reader};
use crate::cache::ActivationCache;
use crate::datagen::Label;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::SimilarityConfig;
use crate::protonet::{
    ClassLayer, ModelVersion, Prototype, PrototypeId, PrototypeSource, TrainConfig,
};

pub const MODEL_MAGIC: &[u8; 4] = b"PFMD";
pub const MODEL_FORMAT_VERSION: u16 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const PROTOTYPES_FILE: &str = "prototypes.bin";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const TRAIN_CACHE_FILE: &str = "train_cache.bin";
pub const TEST_CACHE_FILE: &str = "test_cache.bin";
pub const LINEAGE_FILE: &str = "lineage.json";

const KIND_PROTOTYPES: u8 = 1;
const KIND_WEIGHTS: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrototypeMeta {
    id: PrototypeId,
    class: Label,
    source: Option<PrototypeSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    id: String,
    parent_id: Option<String>,
    note: String,
    encoder: EncoderConfig,
    similarity: SimilarityConfig,
    train_config: TrainConfig,
    prototypes: Vec<PrototypeMeta>,
}

fn matrix_bytes(kind: u8, cols: usize, rows: impl Iterator<Item = Vec<f32>>) -> Vec<u8> {
    let rows: Vec<Vec<f32>> = rows.collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u16(&mut buf, MODEL_FORMAT_VERSION);
    buf.push(kind);
    put_u32(&mut buf, rows.len() as u32);
    put_u32(&mut buf, cols as u32);
    for r in &rows {
        put_f32s(&mut buf, r);
    }
    buf
}

fn read_matrix(path: &Path, kind: u8) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic(MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
    let k = r.u8()?;
    if k != kind {
        return Err(r.header_err(format!("expected block kind {kind}, found {k}")));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.floats(rows * cols)?;
    r.finish()?;
    Ok((rows, cols, data))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `model.json`, `prototypes.bin` and `weights.bin` into `dir`.
pub fn save_model(model: &ModelVersion, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = ModelFile {
        id: model.id.clone(),
        parent_id: model.parent_id.clone(),
        note: model.note.clone(),
        encoder: model.encoder.clone(),
        similarity: model.similarity,
        train_config: model.train_config.clone(),
        prototypes: model
            .prototypes
            .iter()
            .map(|p| PrototypeMeta {
                id: p.id,
                class: p.class,
                source: p.source.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(MODEL_FILE), &file)?;
    let protos = matrix_bytes(
        KIND_PROTOTYPES,
        model.depth(),
        model.prototypes.iter().map(|p| p.vector.clone()),
    );
    let path = dir.join(PROTOTYPES_FILE);
    fs::write(&path, protos).map_err(|e| Error::io(&path, e))?;
    let weights = matrix_bytes(
        KIND_WEIGHTS,
        2,
        model.class_layer.weights.iter().map(|w| w.to_vec()),
    );
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, weights).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<ModelVersion> {
    let file: ModelFile = read_json(&dir.join(MODEL_FILE))?;
    let p = file.prototypes.len();
    let ppath = dir.join(PROTOTYPES_FILE);
    let (rows, d, vectors) = read_matrix(&ppath, KIND_PROTOTYPES)?;
    if rows != p || d != file.encoder.depth {
        return Err(Error::Format {
            path: ppath,
            detail: format!(
                "{rows}x{d} prototype block for {p} prototypes of depth {}",
                file.encoder.depth
            ),
        });
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let (wrows, wcols, weights) = read_matrix(&wpath, KIND_WEIGHTS)?;
    if wrows != p || wcols != 2 {
        return Err(Error::Format {
            path: wpath,
            detail: format!("{wrows}x{wcols} weight block for {p} prototypes"),
        });
    }
    let model = ModelVersion {
        id: file.id,
        parent_id: file.parent_id,
        note: file.note,
        encoder: file.encoder,
        similarity: file.similarity,
        prototypes: file
            .prototypes
            .into_iter()
            .zip(vectors.chunks_exact(d.max(1)))
            .map(|(m, v)| Prototype {
                id: m.id,
                class: m.class,
                vector: v.to_vec(),
                source: m.source,
            })
            .collect(),
        class_layer: ClassLayer {
            weights: weights.chunks_exact(2).map(|w| [w[0], w[1]]).collect(),
        },
        train_config: file.train_config,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub id: String,
    pub parent_id: Option<String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Most recently committed version.
    pub head: String,
    /// In creation order; the first entry is the initial model.
    pub versions: Vec<LineageEntry>,
}

impl Lineage {
    pub fn get(&self, id: &str) -> Option<&LineageEntry> {
        self.versions.iter().find(|v| v.id == id)
    }

    /// Ids from `id` up to the root.
    pub fn ancestry(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = self.get(id);
        while let Some(e) = cur {
            out.push(e.id.clone());
            cur = e.parent_id.as_deref().and_then(|p| self.get(p));
        }
        out
    }
}

/// Directory of model versions plus `lineage.json`.
#[derive(Debug, Clone)]
pub struct VersionStore {
    root: PathBuf,
}

impl VersionStore {
    /// Creates a store whose single version is `initial`.
    pub fn create(
        root: &Path,
        initial: &ModelVersion,
        train: &ActivationCache,
        test: &ActivationCache,
    ) -> Result<Self> {
        if root.join(LINEAGE_FILE).exists() {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a version store",
                root.display()
            )));
        }
        if initial.parent_id.is_some() {
            return Err(Error::InvalidArgument(format!(
                "initial model {} has a parent",
                initial.id
            )));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let store = Self {
            root: root.to_path_buf(),
        };
        store.write_version(initial, train, test)?;
        let lineage = Lineage {
            head: initial.id.clone(),
            versions: vec![LineageEntry {
                id: initial.id.clone(),
                parent_id: None,
                note: initial.note.clone(),
            }],
        };
        write_json(&root.join(LINEAGE_FILE), &lineage)?;
        Ok(store)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let store = Self {
            root: root.to_path_buf(),
        };
        let lineage = store.lineage()?;
        for v in &lineage.versions {
            if let Some(p) = &v.parent_id {
                if !lineage
                    .versions
                    .iter()
                    .take_while(|e| e.id != v.id)
                    .any(|e| &e.id == p)
                {
                    return Err(Error::Format {
                        path: root.join(LINEAGE_FILE),
                        detail: format!(
                            "version {} names parent {p} that does not precede it",
                            v.id
                        ),
                    });
                }
            }
        }
        if lineage.get(&lineage.head).is_none() {
            return Err(Error::Format {
                path: root.join(LINEAGE_FILE),
                detail: format!("unknown head {}", lineage.head),
            });
        }
        Ok(store)
    }

    pub fn is_store(root: &Path) -> bool {
        root.join(LINEAGE_FILE).is_file()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lineage(&self) -> Result<Lineage> {
        read_json(&self.root.join(LINEAGE_FILE))
    }

    pub fn version_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn write_version(
        &self,
        model: &ModelVersion,
        train: &ActivationCache,
        test: &ActivationCache,
    ) -> Result<()> {
        train.check_alignment(model)?;
        test.check_alignment(model)?;
        let dir = self.version_dir(&model.id);
        if dir.exists() {
            return Err(Error::InvalidArgument(format!(
                "version {} already exists",
                model.id
            )));
        }
        save_model(model, &dir)?;
        train.store(&dir.join(TRAIN_CACHE_FILE))?;
        test.store(&dir.join(TEST_CACHE_FILE))
    }

    /// Persists a committed version and makes it the head.
    pub fn save(
        &self,
        model: &ModelVersion,
        train: &ActivationCache,
        test: &ActivationCache,
    ) -> Result<()> {
        let mut lineage = self.lineage()?;
        let parent = model
            .parent_id
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("version {} has no parent", model.id)))?;
        if lineage.get(parent).is_none() {
            return Err(Error::NotFound(format!("parent version {parent}")));
        }
        if lineage.get(&model.id).is_some() {
            return Err(Error::InvalidArgument(format!(
                "version {} already exists",
                model.id
            )));
        }
        self.write_version(model, train, test)?;
        lineage.versions.push(LineageEntry {
            id: model.id.clone(),
            parent_id: model.parent_id.clone(),
            note: model.note.clone(),
        });
        lineage.head = model.id.clone();
        write_json(&self.root.join(LINEAGE_FILE), &lineage)
    }

    pub fn set_head(&self, id: &str) -> Result<()> {
        let mut lineage = self.lineage()?;
        if lineage.get(id).is_none() {
            return Err(Error::NotFound(format!("version {id}")));
        }
        lineage.head = id.to_string();
        write_json(&self.root.join(LINEAGE_FILE), &lineage)
    }

    pub fn load(&self, id: &str) -> Result<ModelVersion> {
        if self.lineage()?.get(id).is_none() {
            return Err(Error::NotFound(format!("version {id}")));
        }
        load_model(&self.version_dir(id))
    }

    /// Train and test caches of a version, verified against its model.
    pub fn load_caches(&self, model: &ModelVersion) -> Result<(ActivationCache, ActivationCache)> {
        let dir = self.version_dir(&model.id);
        Ok((
            ActivationCache::load(&dir.join(TRAIN_CACHE_FILE), model)?,
            ActivationCache::load(&dir.join(TEST_CACHE_FILE), model)?,
        ))
    }
}

/// Resolves a `--model` argument: a model directory, or a store meaning its head.
pub fn resolve_model(path: &Path) -> Result<(ModelVersion, PathBuf)> {
    if path.join(MODEL_FILE).is_file() {
        return Ok((load_model(path)?, path.to_path_buf()));
    }
    if VersionStore::is_store(path) {
        let store = VersionStore::open(path)?;
        let head = store.lineage()?.head;
        let dir = store.version_dir(&head);
        return Ok((load_model(&dir)?, dir));
    }
    Err(Error::NotFound(format!(
        "no model or version store at {}",
        path.display()
    )))
}
