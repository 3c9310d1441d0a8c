//! Activation cache: stored latent maps plus per-prototype maxsims for one split.
//!
//! File layout (`cache.bin`, little-endian):
//! magic `PFAC`, u16 version, recipe, model id, u8 split, u64 prototype
//! fingerprint, u32 P, P × u32 prototype ids, u32 N, u32 rows, u32 cols,
//! u32 depth, u32 cell size, then per sample: id, source id, u8 label,
//! u32 frame index, u32 k, 16 × f32 landmarks, rows·cols·depth f32 latent,
//! P × f32 maxsims. Strings are u16-length-prefixed UTF-8.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{put_f32s, put_str, put_u16, put_u32, put_u64, Reader};
use crate::datagen::{Label, Landmarks, Point, SampleMeta, Split};
use crate::encoder::LatentMap;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::protonet::{forward, EncodedSample, MaxsimMatrix, ModelVersion, PrototypeId};

pub const CACHE_MAGIC: &[u8; 4] = b"PFAC";
pub const CACHE_FORMAT_VERSION: u16 = 1;

/// Samples re-verified against the model when a cache is loaded.
pub const LOAD_SPOT_CHECKS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedSample {
    pub meta: SampleMeta,
    pub latent: LatentMap,
    pub maxsims: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub split: Split,
    pub recipe: String,
    pub model_id: String,
    /// Prototype ids the maxsim columns are aligned to.
    pub prototype_ids: Vec<PrototypeId>,
    /// Fingerprint of the prototype vectors the maxsims were computed from.
    pub fingerprint: u64,
    pub samples: Vec<CachedSample>,
}

/// FNV-1a over prototype ids, classes and vector bits.
pub fn prototype_fingerprint(model: &ModelVersion) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for p in &model.prototypes {
        eat(&p.id.0.to_le_bytes());
        eat(&[p.class.index() as u8]);
        for v in &p.vector {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

impl ActivationCache {
    /// Computes maxsims of `model` for every encoded sample.
    pub fn build(model: &ModelVersion, split: Split, samples: &[EncodedSample]) -> Result<Self> {
        if let Some(s) = samples
            .iter()
            .find(|s| s.latent.recipe != model.encoder.recipe)
        {
            return Err(Error::StaleCache(format!(
                "sample {} was encoded with recipe {:?}, model expects {:?}",
                s.meta.id, s.latent.recipe, model.encoder.recipe
            )));
        }
        let rows = samples
            .par_iter()
            .map(|s| forward(model, &s.latent).map(|f| f.maxsims))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split,
            recipe: model.encoder.recipe.clone(),
            model_id: model.id.clone(),
            prototype_ids: model.prototype_ids(),
            fingerprint: prototype_fingerprint(model),
            samples: samples
                .iter()
                .zip(rows)
                .map(|(s, maxsims)| CachedSample {
                    meta: s.meta.clone(),
                    latent: s.latent.clone(),
                    maxsims,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.meta.label).collect()
    }

    pub fn encoded(&self) -> Vec<EncodedSample> {
        self.samples
            .iter()
            .map(|s| EncodedSample {
                meta: s.meta.clone(),
                latent: s.latent.clone(),
            })
            .collect()
    }

    pub fn find(&self, sample_id: &str) -> Option<&CachedSample> {
        self.samples.iter().find(|s| s.meta.id == sample_id)
    }

    pub fn matrix(&self) -> MaxsimMatrix {
        MaxsimMatrix {
            rows: self.samples.len(),
            cols: self.prototype_ids.len(),
            data: self
                .samples
                .iter()
                .flat_map(|s| s.maxsims.iter().copied())
                .collect(),
            labels: self.labels(),
        }
    }

    /// This cache restricted to the maxsim columns in `keep`, realigned to `model`.
    ///
    /// No latent map is read, so this costs no distance evaluations.
    pub fn select_columns(&self, keep: &[usize], model: &ModelVersion) -> Result<Self> {
        let p = self.prototype_ids.len();
        if let Some(&j) = keep.iter().find(|&&j| j >= p) {
            return Err(Error::Shape(format!(
                "column {j} out of range for {p} prototypes"
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| CachedSample {
                meta: s.meta.clone(),
                latent: s.latent.clone(),
                maxsims: keep.iter().map(|&j| s.maxsims[j]).collect(),
            })
            .collect();
        self.realigned(samples, model)
    }

    /// This cache with column `j` replaced by `column`, or `column` appended when
    /// `j` equals the current width.
    pub fn with_column(&self, j: usize, column: &[f32], model: &ModelVersion) -> Result<Self> {
        let p = self.prototype_ids.len();
        if j > p || column.len() != self.samples.len() {
            return Err(Error::Shape(format!(
                "column {j} of length {} for a cache of {} samples and {p} prototypes",
                column.len(),
                self.samples.len()
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(column)
            .map(|(s, &v)| {
                let mut maxsims = s.maxsims.clone();
                if j == p {
                    maxsims.push(v);
                } else {
                    maxsims[j] = v;
                }
                CachedSample {
                    meta: s.meta.clone(),
                    latent: s.latent.clone(),
                    maxsims,
                }
            })
            .collect();
        self.realigned(samples, model)
    }

    fn realigned(&self, samples: Vec<CachedSample>, model: &ModelVersion) -> Result<Self> {
        let out = Self {
            split: self.split,
            recipe: self.recipe.clone(),
            model_id: model.id.clone(),
            prototype_ids: model.prototype_ids(),
            fingerprint: prototype_fingerprint(model),
            samples,
        };
        if out
            .samples
            .first()
            .is_some_and(|s| s.maxsims.len() != out.prototype_ids.len())
        {
            return Err(Error::Shape(format!(
                "{} maxsim columns for {} prototypes of model {}",
                out.samples[0].maxsims.len(),
                out.prototype_ids.len(),
                model.id
            )));
        }
        Ok(out)
    }

    /// Rejects the cache unless it was built for exactly this model's prototypes.
    pub fn check_alignment(&self, model: &ModelVersion) -> Result<()> {
        if self.recipe != model.encoder.recipe {
            return Err(Error::StaleCache(format!(
                "cache recipe {:?} does not match model recipe {:?}",
                self.recipe, model.encoder.recipe
            )));
        }
        let ids = model.prototype_ids();
        if self.prototype_ids != ids {
            return Err(Error::StaleCache(format!(
                "cache built for model {} is aligned to prototypes {}, model {} has {}",
                self.model_id,
                id_list(&self.prototype_ids),
                model.id,
                id_list(&ids)
            )));
        }
        if self.fingerprint != prototype_fingerprint(model) {
            return Err(Error::StaleCache(format!(
                "prototype vectors of model {} differ from those cache {} was built with",
                model.id, self.model_id
            )));
        }
        Ok(())
    }

    /// Recomputes one sample's maxsims and requires bitwise equality with the stored row.
    pub fn verify_sample(&self, index: usize, model: &ModelVersion) -> Result<()> {
        let s = self
            .samples
            .get(index)
            .ok_or_else(|| Error::NotFound(format!("cache sample index {index}")))?;
        let fresh = forward(model, &s.latent)?.maxsims;
        let same = fresh.len() == s.maxsims.len()
            && fresh
                .iter()
                .zip(&s.maxsims)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::StaleCache(format!(
                "stored maxsims of sample {} do not match model {}",
                s.meta.id, model.id
            )));
        }
        Ok(())
    }

    /// Alignment check plus recomputation of a few seeded-random samples.
    pub fn verify(&self, model: &ModelVersion) -> Result<()> {
        self.check_alignment(model)?;
        let n = self.samples.len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.fingerprint);
        for i in sample_indices(&mut rng, n, LOAD_SPOT_CHECKS.min(n)) {
            self.verify_sample(i, model)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (rows, cols, depth, cell) = match self.samples.first() {
            Some(s) => (
                s.latent.rows(),
                s.latent.cols(),
                s.latent.depth(),
                s.latent.cell_size,
            ),
            None => (0, 0, 0, 0),
        };
        let p = self.prototype_ids.len();
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        put_u16(&mut buf, CACHE_FORMAT_VERSION);
        put_str(&mut buf, &self.recipe)?;
        put_str(&mut buf, &self.model_id)?;
        buf.push(split_code(self.split));
        put_u64(&mut buf, self.fingerprint);
        put_u32(&mut buf, p as u32);
        for id in &self.prototype_ids {
            put_u32(&mut buf, id.0);
        }
        put_u32(&mut buf, self.samples.len() as u32);
        for v in [rows, cols, depth] {
            put_u32(&mut buf, v as u32);
        }
        put_u32(&mut buf, cell);
        for s in &self.samples {
            if s.latent.grid.shape() != [rows, cols, depth]
                || s.latent.cell_size != cell
                || s.maxsims.len() != p
            {
                return Err(Error::Shape(format!(
                    "cache sample {} does not match the cache layout",
                    s.meta.id
                )));
            }
            put_str(&mut buf, &s.meta.id)?;
            put_str(&mut buf, &s.meta.source_id)?;
            buf.push(s.meta.label.index() as u8);
            put_u32(&mut buf, s.meta.frame_index);
            put_u32(&mut buf, s.meta.k);
            for pt in &s.meta.landmarks.0 {
                put_f32s(&mut buf, &[pt.x, pt.y]);
            }
            put_f32s(&mut buf, s.latent.grid.data());
            put_f32s(&mut buf, &s.maxsims);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(CACHE_MAGIC, CACHE_FORMAT_VERSION)?;
        let recipe = r.string()?;
        let model_id = r.string()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            c => return Err(r.header_err(format!("unknown split code {c}"))),
        };
        let fingerprint = r.u64()?;
        let p = r.u32()? as usize;
        let prototype_ids = (0..p)
            .map(|_| r.u32().map(PrototypeId))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let cell_size = r.u32()?;
        let mut samples = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.string()?;
            let source_id = r.string()?;
            let label = Label::from_index(r.u8()? as usize)
                .ok_or_else(|| r.header_err("unknown label code"))?;
            let frame_index = r.u32()?;
            let k = r.u32()?;
            let lm = r.floats(16)?;
            let mut points = [Point { x: 0.0, y: 0.0 }; 8];
            for (pt, xy) in points.iter_mut().zip(lm.chunks_exact(2)) {
                *pt = Point { x: xy[0], y: xy[1] };
            }
            let grid = Tensor::new(vec![rows, cols, depth], r.floats(rows * cols * depth)?)
                .map_err(|e| r.header_err(format!("latent of {id}: {e}")))?;
            let maxsims = r.floats(p)?;
            let latent = LatentMap {
                grid,
                sample_id: id.clone(),
                cell_size,
                recipe: recipe.clone(),
            };
            let meta = SampleMeta {
                id,
                label,
                source_id,
                frame_index,
                k,
                landmarks: Landmarks(points),
            };
            samples.push(CachedSample {
                meta,
                latent,
                maxsims,
            });
        }
        r.finish()?;
        Ok(Self {
            split,
            recipe,
            model_id,
            prototype_ids,
            fingerprint,
            samples,
        })
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache without checking it against any model.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads a cache and verifies it against `model`.
    pub fn load(path: &Path, model: &ModelVersion) -> Result<Self> {
        let cache = Self::load_unchecked(path)?;
        cache.verify(model)?;
        Ok(cache)
    }
}

fn split_code(split: Split) -> u8 {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

fn id_list(ids: &[PrototypeId]) -> String {
    ids.iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Bytes taken by the fixed part of a cache file before the first sample.
pub fn cache_header_len(recipe: &str, model_id: &str, p: usize) -> usize {
    4 + 2 + 2 + recipe.len() + 2 + model_id.len() + 1 + 8 + 4 + 4 * p + 4 + 4 * 4
}

/// Bytes taken by one sample record, excluding its payload floats.
pub fn cache_sample_metadata_len(id: &str, source_id: &str) -> usize {
    2 + id.len() + 2 + source_id.len() + 1 + 4 + 4 + 16 * 4
}
