//! Deterministic synthetic face-sequence generator and the on-disk sample format.
//!
//! A sample is one RGB face crop followed by `k - 1` optical-flow fields.
//! Manipulated samples carry exactly one localized artifact near a facial
//! landmark, so the ground-truth location of every manipulation is known.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::Reader;
use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "synthface-1";
pub const SAMPLE_MAGIC: &[u8; 4] = b"PFSQ";
pub const SAMPLE_FORMAT_VERSION: u16 = 1;

/// Maximum distance between an artifact patch center and its landmark.
pub const ARTIFACT_LANDMARK_TOLERANCE: f32 = 6.0;
pub const PATCH_MIN: u32 = 8;
pub const PATCH_MAX: u32 = 16;
/// Per-axis bound on how far a landmark may sit from its canonical position.
pub const LANDMARK_JITTER: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pristine,
    Manipulated,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Pristine, Label::Manipulated];

    pub fn index(self) -> usize {
        match self {
            Label::Pristine => 0,
            Label::Manipulated => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Pristine),
            1 => Some(Label::Manipulated),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Pristine => Label::Manipulated,
            Label::Manipulated => Label::Pristine,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Pristine => "pristine",
            Label::Manipulated => "manipulated",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkName {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
    Chin,
    Hairline,
    LeftCheek,
    RightCheek,
}

impl LandmarkName {
    /// Fixed ordering; also the tie-break order for nearest-landmark queries.
    pub const ALL: [LandmarkName; 8] = [
        LandmarkName::LeftEye,
        LandmarkName::RightEye,
        LandmarkName::Nose,
        LandmarkName::Mouth,
        LandmarkName::Chin,
        LandmarkName::Hairline,
        LandmarkName::LeftCheek,
        LandmarkName::RightCheek,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkName::LeftEye => "left_eye",
            LandmarkName::RightEye => "right_eye",
            LandmarkName::Nose => "nose",
            LandmarkName::Mouth => "mouth",
            LandmarkName::Chin => "chin",
            LandmarkName::Hairline => "hairline",
            LandmarkName::LeftCheek => "left_cheek",
            LandmarkName::RightCheek => "right_cheek",
        }
    }

    /// Canonical position as a fraction of (width, height).
    fn canonical(self) -> (f32, f32) {
        match self {
            LandmarkName::LeftEye => (0.35, 0.40),
            LandmarkName::RightEye => (0.65, 0.40),
            LandmarkName::Nose => (0.50, 0.56),
            LandmarkName::Mouth => (0.50, 0.72),
            LandmarkName::Chin => (0.50, 0.85),
            LandmarkName::Hairline => (0.50, 0.19),
            LandmarkName::LeftCheek => (0.28, 0.60),
            LandmarkName::RightCheek => (0.72, 0.60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f32 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Landmark positions in pixel coordinates, indexed in [`LandmarkName::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks(pub [Point; 8]);

impl Landmarks {
    pub fn get(&self, name: LandmarkName) -> Point {
        self.0[name.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (LandmarkName, Point)> + '_ {
        LandmarkName::ALL.iter().map(move |&n| (n, self.get(n)))
    }

    /// Nearest landmark to `p`; ties resolve to the earlier name in the fixed order.
    pub fn nearest(&self, p: &Point) -> LandmarkName {
        let mut best = LandmarkName::ALL[0];
        let mut best_d = f32::INFINITY;
        for (name, q) in self.iter() {
            let d = q.distance(p);
            if d < best_d {
                best = name;
                best_d = d;
            }
        }
        best
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn center(&self) -> Point {
        Point {
            x: (self.x0 + self.x1) as f32 / 2.0,
            y: (self.y0 + self.y1) as f32 / 2.0,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    SeamEdge,
    BlurPatch,
    FlowFlicker,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 3] = [
        ArtifactKind::SeamEdge,
        ArtifactKind::BlurPatch,
        ArtifactKind::FlowFlicker,
    ];

    fn code(self) -> u8 {
        match self {
            ArtifactKind::SeamEdge => 1,
            ArtifactKind::BlurPatch => 2,
            ArtifactKind::FlowFlicker => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(ArtifactKind::SeamEdge),
            2 => Some(ArtifactKind::BlurPatch),
            3 => Some(ArtifactKind::FlowFlicker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub landmark: LandmarkName,
    pub bbox: BBox,
}

/// Metadata carried alongside a sample's latent map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub label: Label,
    pub source_id: String,
    pub frame_index: u32,
    /// Frames spanned: the RGB frame plus the flow fields.
    pub k: u32,
    pub landmarks: Landmarks,
}

/// One model input: an RGB frame plus `k - 1` flow fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSequence {
    pub id: String,
    pub source_id: String,
    pub frame_index: u32,
    pub label: Label,
    pub height: u32,
    pub width: u32,
    /// `height × width × 3`, row-major, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// `k - 1` fields of `height × width × 2` (dx, dy).
    pub flows: Vec<Vec<f32>>,
    pub landmarks: Landmarks,
    pub artifact: Option<Artifact>,
}

impl SampleSequence {
    /// Frames spanned by the sample: the RGB frame plus one per flow field.
    pub fn k(&self) -> usize {
        self.flows.len() + 1
    }

    #[inline]
    pub fn rgb_at(&self, x: u32, y: u32, c: usize) -> f32 {
        self.rgb[((y * self.width + x) as usize) * 3 + c]
    }

    #[inline]
    pub fn flow_at(&self, t: usize, x: u32, y: u32) -> (f32, f32) {
        let i = ((y * self.width + x) as usize) * 2;
        (self.flows[t][i], self.flows[t][i + 1])
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta {
            id: self.id.clone(),
            label: self.label,
            source_id: self.source_id.clone(),
            frame_index: self.frame_index,
            k: self.k() as u32,
            landmarks: self.landmarks,
        }
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let hw = (self.height * self.width) as usize;
        if self.rgb.len() != hw * 3 {
            return Err(Error::Shape(format!(
                "rgb has {} values, expected {}",
                self.rgb.len(),
                hw * 3
            )));
        }
        if self.flows.is_empty() {
            return Err(Error::Shape("sample needs at least one flow field".into()));
        }
        for (t, f) in self.flows.iter().enumerate() {
            if f.len() != hw * 2 {
                return Err(Error::Shape(format!(
                    "flow {t} has {} values, expected {}",
                    f.len(),
                    hw * 2
                )));
            }
        }
        for (name, p) in self.landmarks.iter() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f32 && p.y < self.height as f32) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {} outside image",
                    name.as_str()
                )));
            }
        }
        match (self.label, &self.artifact) {
            (Label::Pristine, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "pristine sample carries an artifact".into(),
                ))
            }
            (Label::Manipulated, None) => {
                return Err(Error::InvalidArgument(
                    "manipulated sample without artifact".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn payload_len(&self) -> usize {
        4 * (self.rgb.len() + self.flows.iter().map(Vec::len).sum::<usize>())
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: u32,
    pub width: u32,
    pub k: u32,
    pub train_samples: usize,
    pub test_samples: usize,
    pub manipulated_fraction: f64,
    pub artifact_kinds: Vec<ArtifactKind>,
    /// Consecutive sampled windows drawn from each synthetic video.
    pub windows_per_video: usize,
    /// Upper bound on pristine flow magnitude, in pixels per frame.
    pub motion_bound: f32,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            k: 10,
            train_samples: 200,
            test_samples: 100,
            manipulated_fraction: 0.5,
            artifact_kinds: ArtifactKind::ALL.to_vec(),
            windows_per_video: 4,
            motion_bound: 1.0,
            seed: 42,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "image must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.manipulated_fraction > 0.0 && self.manipulated_fraction < 1.0) {
            return Err(Error::Config(format!(
                "manipulated fraction must lie in (0, 1), got {}",
                self.manipulated_fraction
            )));
        }
        if self.artifact_kinds.is_empty() {
            return Err(Error::Config(
                "at least one artifact kind must be enabled".into(),
            ));
        }
        if self.windows_per_video == 0 {
            return Err(Error::Config("windows_per_video must be positive".into()));
        }
        if !(self.motion_bound > 0.0) {
            return Err(Error::Config("motion bound must be positive".into()));
        }
        Ok(())
    }

    fn label_counts(&self, n: usize) -> (usize, usize) {
        let manipulated = ((n as f64) * self.manipulated_fraction).round() as usize;
        (n - manipulated, manipulated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub pristine: usize,
    pub manipulated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub split: Split,
    pub label: Label,
    pub source_id: String,
    pub frame_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub seed: u64,
    pub height: u32,
    pub width: u32,
    pub k: u32,
    pub train: LabelCounts,
    pub test: LabelCounts,
    pub config: DataConfig,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }

    /// Loads every sample of a split in manifest order.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<SampleSequence>> {
        self.records(split)
            .map(|r| load_sample(&dir.join(&r.path)))
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|r| r.id == id)
    }
}

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<SampleSequence>,
    pub test: Vec<SampleSequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampleSequence] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, id: &str) -> Option<&SampleSequence> {
        self.train.iter().chain(&self.test).find(|s| s.id == id)
    }
}

/// Explicit description of one sample; [`synthesize`] renders it deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub id: String,
    pub source_id: String,
    pub frame_index: u32,
    pub height: u32,
    pub width: u32,
    pub k: u32,
    pub motion_bound: f32,
    /// Fixes the per-video face style, landmark jitter and motion.
    pub video_seed: u64,
    /// Fixes the per-window drift and flow perturbations.
    pub window_seed: u64,
    pub artifact: Option<ArtifactPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactPlan {
    pub kind: ArtifactKind,
    pub landmark: LandmarkName,
    pub bbox: BBox,
    /// Flicker amplitude in pixels per frame; unused by other kinds.
    pub amplitude: f32,
    /// Flicker direction in radians; unused by other kinds.
    pub angle: f32,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

#[inline]
fn hash_noise(seed: u64, x: i64, y: i64, c: u64) -> f32 {
    let h = mix(mix(seed, x as u64), mix(y as u64, c));
    // Top 24 bits to [-1, 1).
    ((h >> 40) as f32 / (1u64 << 23) as f32) - 1.0
}

struct VideoStyle {
    skin: [f32; 3],
    background: [f32; 3],
    hair: [f32; 3],
    base_landmarks: [Point; 8],
    velocity: (f32, f32),
    texture_seed: u64,
}

impl VideoStyle {
    fn new(seed: u64, width: u32, height: u32, motion_bound: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skin = [
            rng.random_range(0.55..0.85),
            rng.random_range(0.40..0.65),
            rng.random_range(0.30..0.55),
        ];
        let background = [
            rng.random_range(0.10..0.40),
            rng.random_range(0.15..0.45),
            rng.random_range(0.20..0.55),
        ];
        let hair_level = rng.random_range(0.05..0.30);
        let hair = [hair_level * 1.1, hair_level * 0.9, hair_level * 0.7];
        let mut base_landmarks = [Point { x: 0.0, y: 0.0 }; 8];
        for (i, name) in LandmarkName::ALL.iter().enumerate() {
            let (fx, fy) = name.canonical();
            base_landmarks[i] = Point {
                x: fx * width as f32 + rng.random_range(-2.0..=2.0f32),
                y: fy * height as f32 + rng.random_range(-2.0..=2.0f32),
            };
        }
        let speed = rng.random_range(0.50..0.65) * motion_bound;
        let heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        Self {
            skin,
            background,
            hair,
            base_landmarks,
            velocity: (speed * heading.cos(), speed * heading.sin()),
            texture_seed: rng.random(),
        }
    }
}

/// Renders a sample from its explicit spec.
pub fn synthesize(spec: &SampleSpec) -> Result<SampleSequence> {
    let (w, h) = (spec.width, spec.height);
    if spec.k < 2 || w < 32 || h < 32 {
        return Err(Error::Config(format!(
            "invalid sample geometry {w}x{h}, k={}",
            spec.k
        )));
    }
    let style = VideoStyle::new(spec.video_seed, w, h, spec.motion_bound);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.window_seed);

    let drift = (
        rng.random_range(-1.0..=1.0f32),
        rng.random_range(-1.0..=1.0f32),
    );
    let mut lm = style.base_landmarks;
    for p in &mut lm {
        p.x = (p.x + drift.0).clamp(0.0, w as f32 - 1.0);
        p.y = (p.y + drift.1).clamp(0.0, h as f32 - 1.0);
    }
    let landmarks = Landmarks(lm);
    let tex_off = (drift.0.round() as i64, drift.1.round() as i64);

    let mut rgb = render_face(&style, &landmarks, w, h, tex_off);

    let n_fields = (spec.k - 1) as usize;
    let bound = spec.motion_bound;
    let mut fields = Vec::with_capacity(n_fields);
    let center = landmarks.get(LandmarkName::Nose);
    for _ in 0..n_fields {
        let e = (
            rng.random_range(-0.07..=0.07f32) * bound,
            rng.random_range(-0.07..=0.07f32) * bound,
        );
        let omega = rng.random_range(-0.0015..=0.0015f32) * bound;
        let v = (style.velocity.0 + e.0, style.velocity.1 + e.1);
        let mut field = vec![0.0f32; (w * h * 2) as usize];
        for y in 0..h {
            for x in 0..w {
                let rx = x as f32 + 0.5 - center.x;
                let ry = y as f32 + 0.5 - center.y;
                let i = ((y * w + x) * 2) as usize;
                field[i] = v.0 - omega * ry;
                field[i + 1] = v.1 + omega * rx;
            }
        }
        fields.push(field);
    }

    let artifact = match &spec.artifact {
        None => None,
        Some(plan) => {
            let b = plan.bbox;
            if b.x1 > w || b.y1 > h || b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::InvalidArgument(format!(
                    "artifact bbox {b:?} outside image"
                )));
            }
            match plan.kind {
                ArtifactKind::SeamEdge => apply_seam(&mut rgb, w, &b),
                ArtifactKind::BlurPatch => apply_blur(&mut rgb, w, h, &b),
                ArtifactKind::FlowFlicker => {
                    let (ux, uy) = (plan.angle.cos(), plan.angle.sin());
                    for (t, field) in fields.iter_mut().enumerate() {
                        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                        for y in b.y0..b.y1 {
                            for x in b.x0..b.x1 {
                                let i = ((y * w + x) * 2) as usize;
                                field[i] += sign * plan.amplitude * ux;
                                field[i + 1] += sign * plan.amplitude * uy;
                            }
                        }
                    }
                }
            }
            Some(Artifact {
                kind: plan.kind,
                landmark: plan.landmark,
                bbox: b,
            })
        }
    };

    let sample = SampleSequence {
        id: spec.id.clone(),
        source_id: spec.source_id.clone(),
        frame_index: spec.frame_index,
        label: if artifact.is_some() {
            Label::Manipulated
        } else {
            Label::Pristine
        },
        height: h,
        width: w,
        rgb,
        flows: fields,
        landmarks,
        artifact,
    };
    Ok(sample)
}

fn render_face(
    style: &VideoStyle,
    lm: &Landmarks,
    w: u32,
    h: u32,
    tex_off: (i64, i64),
) -> Vec<f32> {
    let (wf, hf) = (w as f32, h as f32);
    let le = lm.get(LandmarkName::LeftEye);
    let re = lm.get(LandmarkName::RightEye);
    let nose = lm.get(LandmarkName::Nose);
    let mouth = lm.get(LandmarkName::Mouth);
    let hairline = lm.get(LandmarkName::Hairline);
    let cheeks = [
        lm.get(LandmarkName::LeftCheek),
        lm.get(LandmarkName::RightCheek),
    ];
    let face_c = Point {
        x: (le.x + re.x) / 2.0,
        y: nose.y - 0.02 * hf,
    };
    let (frx, fry) = (0.36 * wf, 0.45 * hf);

    let mut rgb = vec![0.0f32; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            let px = x as f32 + 0.5;
            let py = y as f32 + 0.5;
            let mut c = style.background;
            let shade = 0.06 * (py / hf);
            for v in &mut c {
                *v += shade;
            }
            let fx = (px - face_c.x) / frx;
            let fy = (py - face_c.y) / fry;
            let r2 = fx * fx + fy * fy;
            if r2 <= 1.0 {
                let s = 1.0 - 0.15 * r2;
                c = [style.skin[0] * s, style.skin[1] * s, style.skin[2] * s];
                if py < hairline.y {
                    c = style.hair;
                }
                for ch in &cheeks {
                    let d = Point { x: px, y: py }.distance(ch) / (0.08 * wf);
                    if d < 1.0 {
                        let a = 0.25 * (1.0 - d);
                        c[0] += a * (0.9 - c[0]);
                        c[1] -= a * 0.3 * c[1];
                    }
                }
                if (px - nose.x).abs() < 0.025 * wf && py > nose.y - 0.12 * hf && py < nose.y {
                    for v in &mut c {
                        *v *= 0.85;
                    }
                }
                let mx = (px - mouth.x) / (0.10 * wf);
                let my = (py - mouth.y) / (0.028 * hf);
                if mx * mx + my * my <= 1.0 {
                    c = [0.55, 0.15, 0.18];
                }
                for eye in [le, re] {
                    let ex = (px - eye.x) / (0.065 * wf);
                    let ey = (py - eye.y) / (0.035 * hf);
                    if ex * ex + ey * ey <= 1.0 {
                        c = [0.92, 0.92, 0.90];
                        if (Point { x: px, y: py }).distance(&eye) < 0.026 * wf {
                            c = [0.12, 0.08, 0.06];
                        }
                    }
                }
            }
            let gx = x as i64 - tex_off.0;
            let gy = y as i64 - tex_off.1;
            let lum = 0.07 * hash_noise(style.texture_seed, gx, gy, 0);
            let i = ((y * w + x) * 3) as usize;
            for ch in 0..3 {
                let n = 0.015 * hash_noise(style.texture_seed, gx, gy, 1 + ch as u64);
                rgb[i + ch] = (c[ch] + lum + n).clamp(0.0, 1.0);
            }
        }
    }
    rgb
}

fn apply_seam(rgb: &mut [f32], w: u32, b: &BBox) {
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            let edge = (x - b.x0).min(b.x1 - 1 - x).min(y - b.y0).min(b.y1 - 1 - y);
            let i = ((y * w + x) * 3) as usize;
            if edge < 2 {
                let s = if (x + y) % 2 == 0 { 0.35 } else { -0.35 };
                for ch in 0..3 {
                    rgb[i + ch] = (rgb[i + ch] + s).clamp(0.0, 1.0);
                }
            } else {
                let tint = [0.06, -0.03, -0.03];
                for ch in 0..3 {
                    rgb[i + ch] = (rgb[i + ch] + tint[ch]).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn apply_blur(rgb: &mut [f32], w: u32, h: u32, b: &BBox) {
    let src = rgb.to_vec();
    let r = 2i64;
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            for ch in 0..3 {
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                        if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                            acc += src[((sy as u32 * w + sx as u32) * 3) as usize + ch];
                            n += 1.0;
                        }
                    }
                }
                rgb[((y * w + x) * 3) as usize + ch] = acc / n;
            }
        }
    }
}

/// Places an artifact patch near a landmark, keeping it inside the image and
/// its center within [`ARTIFACT_LANDMARK_TOLERANCE`] of the landmark.
fn place_patch(rng: &mut ChaCha8Rng, p: Point, w: u32, h: u32) -> BBox {
    loop {
        let size = rng.random_range(PATCH_MIN..=PATCH_MAX);
        let r = rng.random_range(0.0..4.0f32);
        let a = rng.random_range(0.0..std::f32::consts::TAU);
        let cx = p.x + r * a.cos();
        let cy = p.y + r * a.sin();
        let x0 = (cx - size as f32 / 2.0)
            .round()
            .clamp(0.0, (w - size) as f32) as u32;
        let y0 = (cy - size as f32 / 2.0)
            .round()
            .clamp(0.0, (h - size) as f32) as u32;
        let b = BBox {
            x0,
            y0,
            x1: x0 + size,
            y1: y0 + size,
        };
        if b.center().distance(&p) <= ARTIFACT_LANDMARK_TOLERANCE {
            return b;
        }
    }
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00,
        Split::Test => 0x7465_7374_0000,
    }
}

/// Generates the whole dataset in memory.
pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train = generate_split(cfg, Split::Train, cfg.train_samples)?;
    let test = generate_split(cfg, Split::Test, cfg.test_samples)?;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        test,
    })
}

fn generate_split(cfg: &DataConfig, split: Split, n: usize) -> Result<Vec<SampleSequence>> {
    let (n_pristine, n_manip) = cfg.label_counts(n);
    let mut out = Vec::with_capacity(n);
    for (label, count) in [(Label::Pristine, n_pristine), (Label::Manipulated, n_manip)] {
        let videos = count.div_ceil(cfg.windows_per_video);
        let mut remaining = count;
        for v in 0..videos {
            let source_id = format!("{}-{}-{:04}", split.as_str(), label.as_str(), v);
            let video_seed = mix(
                mix(cfg.seed, split_salt(split)),
                mix(label.index() as u64, v as u64),
            );
            let windows = remaining.min(cfg.windows_per_video);
            remaining -= windows;
            for t in 0..windows {
                let window_seed = mix(video_seed, 0x5EED_0000 + t as u64);
                let mut spec = SampleSpec {
                    id: format!("{source_id}-w{t:02}"),
                    source_id: source_id.clone(),
                    frame_index: t as u32 * cfg.k,
                    height: cfg.height,
                    width: cfg.width,
                    k: cfg.k,
                    motion_bound: cfg.motion_bound,
                    video_seed,
                    window_seed,
                    artifact: None,
                };
                if label == Label::Manipulated {
                    // Render once without the artifact to obtain this window's landmarks.
                    let base = synthesize(&spec)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(window_seed, 0xA27F));
                    let kind = cfg.artifact_kinds[rng.random_range(0..cfg.artifact_kinds.len())];
                    let landmark = LandmarkName::ALL[rng.random_range(0..LandmarkName::ALL.len())];
                    let bbox = place_patch(
                        &mut rng,
                        base.landmarks.get(landmark),
                        cfg.width,
                        cfg.height,
                    );
                    spec.artifact = Some(ArtifactPlan {
                        kind,
                        landmark,
                        bbox,
                        amplitude: rng.random_range(2.0..3.0) * cfg.motion_bound,
                        angle: rng.random_range(0.0..std::f32::consts::TAU),
                    });
                }
                out.push(synthesize(&spec)?);
            }
        }
    }
    Ok(out)
}

/// Generates a dataset and writes the manifest plus one binary file per sample.
pub fn generate_dataset(cfg: &DataConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let dataset = generate(cfg)?;
    write_dataset(&dataset, out_dir)
}

pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<DatasetManifest> {
    let sample_dir = out_dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    let mut records = Vec::new();
    let mut counts = [LabelCounts::default(); 2];
    for (si, split) in [Split::Train, Split::Test].into_iter().enumerate() {
        for s in dataset.split(split) {
            let rel = format!("samples/{}.pfsq", s.id);
            store_sample(s, &out_dir.join(&rel))?;
            match s.label {
                Label::Pristine => counts[si].pristine += 1,
                Label::Manipulated => counts[si].manipulated += 1,
            }
            records.push(SampleRecord {
                id: s.id.clone(),
                path: rel,
                split,
                label: s.label,
                source_id: s.source_id.clone(),
                frame_index: s.frame_index,
            });
        }
    }
    let cfg = &dataset.config;
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION.to_string(),
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        k: cfg.k,
        train: counts[0],
        test: counts[1],
        config: cfg.clone(),
        samples: records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Size of the fixed-layout header for a sample with the given string lengths.
pub fn sample_header_len(id_len: usize, source_len: usize) -> usize {
    4 + 2 + 4 * 3 + 1 + 4 + 2 + id_len + 2 + source_len + 8 * 8 + 1 + 1 + 4 * 4
}

pub fn encode_sample(s: &SampleSequence) -> Result<Vec<u8>> {
    s.validate()?;
    let mut buf =
        Vec::with_capacity(sample_header_len(s.id.len(), s.source_id.len()) + s.payload_len());
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&SAMPLE_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&s.height.to_le_bytes());
    buf.extend_from_slice(&s.width.to_le_bytes());
    buf.extend_from_slice(&(s.k() as u32).to_le_bytes());
    buf.push(s.label.index() as u8);
    buf.extend_from_slice(&s.frame_index.to_le_bytes());
    for text in [&s.id, &s.source_id] {
        let len = u16::try_from(text.len()).map_err(|_| {
            Error::InvalidArgument(format!("identifier too long: {} bytes", text.len()))
        })?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
    }
    for p in &s.landmarks.0 {
        buf.extend_from_slice(&p.x.to_le_bytes());
        buf.extend_from_slice(&p.y.to_le_bytes());
    }
    match &s.artifact {
        None => buf.extend_from_slice(&[0u8; 18]),
        Some(a) => {
            buf.push(a.kind.code());
            buf.push(a.landmark.index() as u8);
            for v in [a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for v in s.rgb.iter().chain(s.flows.iter().flatten()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn store_sample(s: &SampleSequence, path: &Path) -> Result<()> {
    let bytes = encode_sample(s)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_sample(path: &Path) -> Result<SampleSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path)
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<SampleSequence> {
    let mut r = Reader::new(bytes, path);
    r.magic(SAMPLE_MAGIC, SAMPLE_FORMAT_VERSION)?;
    let height = r.u32()?;
    let width = r.u32()?;
    let k = r.u32()?;
    if height == 0 || width == 0 || k < 2 || height > 4096 || width > 4096 || k > 1024 {
        return Err(r.header_err(format!("implausible dimensions {width}x{height}, k={k}")));
    }
    let label =
        Label::from_index(r.u8()? as usize).ok_or_else(|| r.header_err("unknown label code"))?;
    let frame_index = r.u32()?;
    let id = r.string()?;
    let source_id = r.string()?;
    let mut lm = [Point { x: 0.0, y: 0.0 }; 8];
    for p in &mut lm {
        p.x = r.f32()?;
        p.y = r.f32()?;
    }
    let kind_code = r.u8()?;
    let landmark_code = r.u8()? as usize;
    let bb = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let artifact = if kind_code == 0 {
        None
    } else {
        let kind = ArtifactKind::from_code(kind_code)
            .ok_or_else(|| r.header_err("unknown artifact kind"))?;
        let landmark = *LandmarkName::ALL
            .get(landmark_code)
            .ok_or_else(|| r.header_err("unknown landmark"))?;
        Some(Artifact {
            kind,
            landmark,
            bbox: BBox {
                x0: bb[0],
                y0: bb[1],
                x1: bb[2],
                y1: bb[3],
            },
        })
    };
    let hw = (height * width) as usize;
    let rgb = r.floats(hw * 3)?;
    let mut flows = Vec::with_capacity(k as usize - 1);
    for _ in 1..k {
        flows.push(r.floats(hw * 2)?);
    }
    r.finish()?;
    let s = SampleSequence {
        id,
        source_id,
        frame_index,
        label,
        height,
        width,
        rgb,
        flows,
        landmarks: Landmarks(lm),
        artifact,
    };
    s.validate().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(s)
}
