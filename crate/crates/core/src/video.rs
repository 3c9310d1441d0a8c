//! Sliding-window video prediction, per-prototype contribution traces and
//! frame-range aggregation.
//!
//! A video is the ordered windows cut from one synthetic source. Window `t`
//! covers frames `t·k ..= t·k + k − 1`. Range queries work at window
//! granularity: a window that touches the range counts fully.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Label, SampleSequence};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::protonet::{forward, ModelVersion, PrototypeId};

pub const DEFAULT_FPS: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub title: String,
    pub label: Label,
    pub fps: f64,
    pub windows: Vec<SampleSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    pub title: String,
    pub label: Label,
    pub frame_count: usize,
    pub fps: f64,
    pub k: usize,
    pub windows: usize,
}

impl VideoRecord {
    pub fn new(id: impl Into<String>, label: Label, windows: Vec<SampleSequence>) -> Result<Self> {
        let id = id.into();
        let v = Self {
            title: id.clone(),
            id,
            label,
            fps: DEFAULT_FPS,
            windows,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn k(&self) -> usize {
        self.windows[0].k()
    }

    pub fn frame_count(&self) -> usize {
        self.windows.len() * self.k()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.windows.first() else {
            return Err(Error::InvalidArgument(format!(
                "video {} has no windows",
                self.id
            )));
        };
        let k = first.k();
        for (t, w) in self.windows.iter().enumerate() {
            if (w.height, w.width, w.k()) != (first.height, first.width, k) {
                return Err(Error::Shape(format!(
                    "window {t} of video {} is {}x{}x{}, expected {}x{}x{k}",
                    self.id,
                    w.height,
                    w.width,
                    w.k(),
                    first.height,
                    first.width
                )));
            }
            if w.frame_index as usize != t * k {
                return Err(Error::InvalidArgument(format!(
                    "window {t} of video {} starts at frame {}, expected {}",
                    self.id,
                    w.frame_index,
                    t * k
                )));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> VideoSummary {
        VideoSummary {
            id: self.id.clone(),
            title: self.title.clone(),
            label: self.label,
            frame_count: self.frame_count(),
            fps: self.fps,
            k: self.k(),
            windows: self.windows.len(),
        }
    }
}

/// Groups samples into videos by source id, ordered by id then frame index.
pub fn videos_from_samples(samples: &[SampleSequence]) -> Result<Vec<VideoRecord>> {
    let mut groups: BTreeMap<&str, Vec<&SampleSequence>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.source_id.as_str()).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(id, mut ws)| {
            ws.sort_by_key(|s| s.frame_index);
            let label = ws[0].label;
            if ws.iter().any(|s| s.label != label) {
                return Err(Error::InvalidArgument(format!("video {id} mixes labels")));
            }
            VideoRecord::new(id, label, ws.into_iter().cloned().collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPrediction {
    pub t: usize,
    pub sample_id: String,
    /// First and last frame, inclusive.
    pub frame_span: [usize; 2],
    pub probs: [f64; 2],
    pub logits: [f64; 2],
    /// `weights[j][c] · maxsims[j]`, one row per prototype.
    pub contributions: Vec<[f64; 2]>,
    pub maxsims: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub model_version: String,
    pub video_id: String,
    pub k: usize,
    pub frame_count: usize,
    pub prototype_ids: Vec<PrototypeId>,
    pub windows: Vec<WindowPrediction>,
}

/// One forward pass per window. Windows run in parallel; the trace is in window order.
pub fn predict_video(model: &ModelVersion, video: &VideoRecord) -> Result<PredictionTrace> {
    video.validate()?;
    let k = video.k();
    let windows = video
        .windows
        .par_iter()
        .enumerate()
        .map(|(t, w)| {
            let latent = encode(w, &model.encoder)?;
            let f = forward(model, &latent)?;
            Ok(WindowPrediction {
                t,
                sample_id: w.id.clone(),
                frame_span: [t * k, t * k + k - 1],
                probs: f.probs,
                logits: f.logits,
                contributions: model.class_layer.contributions(&f.maxsims),
                maxsims: f.maxsims,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionTrace {
        model_version: model.id.clone(),
        video_id: video.id.clone(),
        k,
        frame_count: video.frame_count(),
        prototype_ids: model.prototype_ids(),
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameValue {
    pub frame: usize,
    pub t: usize,
    pub probs: [f64; 2],
}

impl PredictionTrace {
    /// Per-frame chart values: each window's probabilities held over its frames.
    pub fn frames(&self) -> Vec<FrameValue> {
        self.windows
            .iter()
            .flat_map(|w| {
                (w.frame_span[0]..=w.frame_span[1]).map(move |frame| FrameValue {
                    frame,
                    t: w.t,
                    probs: w.probs,
                })
            })
            .collect()
    }

    fn windows_in(&self, start: usize, end: usize) -> Result<Vec<&WindowPrediction>> {
        if start > end {
            return Err(Error::InvalidArgument(format!(
                "frame range [{start}, {end}] is reversed"
            )));
        }
        if end >= self.frame_count {
            return Err(Error::InvalidArgument(format!(
                "frame range [{start}, {end}] leaves a video of {} frames",
                self.frame_count
            )));
        }
        let hit: Vec<_> = self
            .windows
            .iter()
            .filter(|w| w.frame_span[0] <= end && w.frame_span[1] >= start)
            .collect();
        if hit.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "frame range [{start}, {end}] covers no window"
            )));
        }
        Ok(hit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub start: usize,
    pub end: usize,
    /// Windows intersecting the range, in order.
    pub windows: Vec<usize>,
    pub mean_probs: [f64; 2],
    pub mean_logits: [f64; 2],
    pub mean_contributions: Vec<[f64; 2]>,
    /// Intersecting windows by descending manipulated probability, ties by index.
    pub top_windows: Vec<usize>,
}

fn mean2<'a>(rows: impl Iterator<Item = &'a [f64; 2]>, n: usize) -> [f64; 2] {
    let mut s = [0.0; 2];
    for r in rows {
        s[0] += r[0];
        s[1] += r[1];
    }
    [s[0] / n as f64, s[1] / n as f64]
}

/// Unweighted mean over the windows intersecting frames `[start, end]`.
pub fn aggregate(trace: &PredictionTrace, start: usize, end: usize) -> Result<Aggregate> {
    let hit = trace.windows_in(start, end)?;
    let n = hit.len();
    let p = trace.prototype_ids.len();
    let mean_contributions = (0..p)
        .map(|j| mean2(hit.iter().map(|w| &w.contributions[j]), n))
        .collect();
    let mut top: Vec<&WindowPrediction> = hit.clone();
    top.sort_by(|a, b| b.probs[1].total_cmp(&a.probs[1]).then(a.t.cmp(&b.t)));
    Ok(Aggregate {
        start,
        end,
        windows: hit.iter().map(|w| w.t).collect(),
        mean_probs: mean2(hit.iter().map(|w| &w.probs), n),
        mean_logits: mean2(hit.iter().map(|w| &w.logits), n),
        mean_contributions,
        top_windows: top.iter().map(|w| w.t).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub prototype_id: PrototypeId,
    pub mean_contribution: f64,
}

/// Prototypes ranked by mean contribution to `class` over the range, ties by id.
/// `n` larger than the prototype count returns every prototype.
pub fn top_contributors(
    trace: &PredictionTrace,
    start: usize,
    end: usize,
    class: Label,
    n: usize,
) -> Result<Vec<Contributor>> {
    let agg = aggregate(trace, start, end)?;
    let mut out: Vec<Contributor> = trace
        .prototype_ids
        .iter()
        .zip(&agg.mean_contributions)
        .map(|(&prototype_id, c)| Contributor {
            prototype_id,
            mean_contribution: c[class.index()],
        })
        .collect();
    out.sort_by(|a, b| {
        b.mean_contribution
            .total_cmp(&a.mean_contribution)
            .then(a.prototype_id.cmp(&b.prototype_id))
    });
    out.truncate(n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, DataConfig};
    use crate::encoder::EncoderConfig;
    use crate::numerics::SimilarityConfig;
    use crate::protonet::{encode_all, ClassLayer, TrainConfig};

    fn setup() -> (ModelVersion, Vec<VideoRecord>) {
        let ds = generate(&DataConfig {
            train_samples: 16,
            test_samples: 12,
            seed: 12,
            ..Default::default()
        })
        .unwrap();
        let enc = EncoderConfig::default();
        let tr = encode_all(&ds.train, &enc).unwrap();
        let cfg = TrainConfig {
            protos_per_class: 2,
            ..TrainConfig::default()
        };
        let m = ModelVersion::initial(enc, SimilarityConfig::default(), cfg, &tr).unwrap();
        (m, videos_from_samples(&ds.test).unwrap())
    }

    fn window(t: usize, probs: [f64; 2], contributions: Vec<[f64; 2]>) -> WindowPrediction {
        WindowPrediction {
            t,
            sample_id: format!("s{t}"),
            frame_span: [t * 10, t * 10 + 9],
            probs,
            logits: crate::protonet::sum_contributions(&contributions),
            contributions,
            maxsims: vec![],
        }
    }

    fn toy(windows: Vec<WindowPrediction>, p: usize) -> PredictionTrace {
        PredictionTrace {
            model_version: "v0".into(),
            video_id: "toy".into(),
            k: 10,
            frame_count: windows.len() * 10,
            prototype_ids: (0..p as u32).map(PrototypeId).collect(),
            windows,
        }
    }

    #[test]
    fn windows_match_per_sample_forward() {
        let (m, videos) = setup();
        let v = videos.iter().find(|v| v.windows.len() >= 3).unwrap();
        let trace = predict_video(&m, v).unwrap();
        assert_eq!(trace.windows.len(), v.windows.len());
        for (w, s) in trace.windows.iter().zip(&v.windows) {
            let f = forward(&m, &encode(s, &m.encoder).unwrap()).unwrap();
            assert_eq!(w.probs, f.probs);
            assert_eq!(w.maxsims, f.maxsims);
            assert_eq!(
                crate::protonet::sum_contributions(&w.contributions),
                w.logits
            );
        }
        let frames = trace.frames();
        assert_eq!(frames.len(), v.frame_count());
        assert!(frames
            .iter()
            .all(|f| f.probs == trace.windows[f.frame / trace.k].probs));
    }

    #[test]
    fn single_window_video() {
        let (m, videos) = setup();
        let one =
            VideoRecord::new("one", videos[0].label, vec![videos[0].windows[0].clone()]).unwrap();
        let trace = predict_video(&m, &one).unwrap();
        assert_eq!(trace.windows.len(), 1);
        let f = forward(&m, &encode(&one.windows[0], &m.encoder).unwrap()).unwrap();
        assert_eq!(trace.windows[0].probs, f.probs);
    }

    #[test]
    fn bad_videos_are_rejected() {
        let (_, videos) = setup();
        let v = &videos[0];
        let mut shuffled = v.windows.clone();
        shuffled.swap(0, 1);
        assert!(VideoRecord::new("x", v.label, shuffled).is_err());
        assert!(VideoRecord::new("x", v.label, vec![]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let trace = toy(
            vec![
                window(0, [0.8, 0.2], vec![[1.0, 0.0]]),
                window(1, [0.2, 0.8], vec![[0.0, 3.0]]),
            ],
            1,
        );
        let a = aggregate(&trace, 0, 19).unwrap();
        assert_eq!(a.mean_probs, [0.5, 0.5]);
        assert_eq!(a.windows, vec![0, 1]);
        assert_eq!(a.top_windows, vec![1, 0]);
        let a = aggregate(&trace, 3, 7).unwrap();
        assert_eq!(a.mean_probs, trace.windows[0].probs);
        assert_eq!(a.mean_contributions, trace.windows[0].contributions);
        let a = aggregate(&trace, 9, 10).unwrap();
        assert_eq!(a.windows, vec![0, 1]);
        assert!(aggregate(&trace, 5, 4).is_err());
        assert!(aggregate(&trace, 0, 20).is_err());
    }

    #[test]
    fn contributor_ranking() {
        let trace = toy(
            vec![window(
                0,
                [0.5, 0.5],
                vec![[0.0, 0.2], [0.0, 0.0], [0.0, 0.2], [0.0, 0.5]],
            )],
            4,
        );
        let top = top_contributors(&trace, 0, 9, Label::Manipulated, 10).unwrap();
        let ids: Vec<u32> = top.iter().map(|c| c.prototype_id.0).collect();
        assert_eq!(ids, vec![3, 0, 2, 1]);
        assert_eq!(top[3].mean_contribution, 0.0);
        assert_eq!(
            top_contributors(&trace, 0, 9, Label::Manipulated, 2)
                .unwrap()
                .len(),
            2
        );
        let single = toy(vec![window(0, [0.5, 0.5], vec![[0.7, 0.1]])], 1);
        assert_eq!(
            top_contributors(&single, 0, 0, Label::Pristine, 5)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn zero_weight_prototype_contributes_nothing() {
        let (mut m, videos) = setup();
        m.class_layer = ClassLayer {
            weights: m
                .class_layer
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| if j == 0 { [0.0, 0.0] } else { *w })
                .collect(),
        };
        let trace = predict_video(&m, &videos[0]).unwrap();
        let top =
            top_contributors(&trace, 0, trace.frame_count - 1, Label::Manipulated, 10).unwrap();
        let zero = top
            .iter()
            .find(|c| c.prototype_id == m.prototypes[0].id)
            .unwrap();
        assert_eq!(zero.mean_contribution, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn aggregate_equals_independent_mean(
            probs in proptest::collection::vec(0.0f64..1.0, 1..8),
            a in 0usize..80,
            len in 0usize..80,
        ) {
            let windows: Vec<_> = probs.iter().enumerate().map(|(t, &p)| window(t, [1.0 - p, p], vec![[p, 2.0 * p]])).collect();
            let trace = toy(windows, 1);
            let (start, end) = (a.min(trace.frame_count - 1), (a + len).min(trace.frame_count - 1));
            let agg = aggregate(&trace, start, end).unwrap();
            let ts: Vec<usize> = (start / 10..=end / 10).collect();
            proptest::prop_assert_eq!(&agg.windows, &ts);
            let mean: f64 = ts.iter().map(|&t| probs[t]).sum::<f64>() / ts.len() as f64;
            proptest::prop_assert!((agg.mean_probs[1] - mean).abs() <= 1e-12);
            proptest::prop_assert!((agg.mean_contributions[0][1] - 2.0 * mean).abs() <= 1e-12);
        }
    }
}
