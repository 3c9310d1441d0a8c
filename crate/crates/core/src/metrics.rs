//! Confusion counts, ROC/AUC and loss breakdowns over cached activations.
//!
//! Manipulated is the positive class. A sample is predicted manipulated when
//! its manipulated probability is at least the threshold, so ties go to
//! manipulated.

use serde::{Deserialize, Serialize};

use crate::cache::ActivationCache;
use crate::datagen::Label;
use crate::error::{Error, Result};
use crate::numerics::{distance_from_similarity, softmax2};
use crate::protonet::{cross_entropy, diversity_loss, l1_cross, LossBreakdown, ModelVersion};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub loss: LossBreakdown,
    pub n_samples: usize,
    pub prototype_count: usize,
}

/// Confusion counts and accuracy from per-sample `[pristine, manipulated]` probabilities.
pub fn confusion_matrix(
    probs: &[[f64; 2]],
    labels: &[Label],
    threshold: f64,
) -> Result<(Confusion, f64)> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument(
            "confusion matrix of an empty set".into(),
        ));
    }
    let mut c = Confusion::default();
    for (p, l) in probs.iter().zip(labels) {
        let predicted = p[1] >= threshold;
        match (predicted, l) {
            (true, Label::Manipulated) => c.tp += 1,
            (true, Label::Pristine) => c.fp += 1,
            (false, Label::Pristine) => c.tn += 1,
            (false, Label::Manipulated) => c.fn_ += 1,
        }
    }
    Ok((c, c.accuracy()))
}

/// ROC curve over all distinct score thresholds and its trapezoidal area.
///
/// Equal scores form one step, so a tie contributes the diagonal half cell. The
/// area is accumulated in integer units of `1 / (2 · positives · negatives)`.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let pos = labels.iter().filter(|l| **l == Label::Manipulated).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("ROC needs both labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            match labels[order[i]] {
                Label::Manipulated => tp += 1,
                Label::Pristine => fp += 1,
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        roc.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok((roc, twice_area as f64 / (2 * pos * neg) as f64))
}

/// Loss breakdown of `model` on cached maxsims, without touching any latent map.
///
/// The smallest squared distance behind a maxsim is recovered through the
/// closed-form inverse of the similarity.
pub fn loss_from_cache(model: &ModelVersion, cache: &ActivationCache) -> Result<LossBreakdown> {
    cache.check_alignment(model)?;
    if cache.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty cache".into()));
    }
    let cfg = &model.train_config;
    let classes = model.classes();
    let (mut ce, mut clus, mut sep) = (0.0, 0.0, 0.0);
    for s in &cache.samples {
        let y = s.meta.label;
        ce += cross_entropy(model.class_layer.logits(&s.maxsims), y);
        let best = |own: bool| {
            s.maxsims
                .iter()
                .zip(&classes)
                .filter(|(_, c)| (**c == y) == own)
                .map(|(&v, _)| v as f64)
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        };
        if let Some(v) = best(true) {
            clus += distance_from_similarity(v, &model.similarity);
        }
        if let Some(v) = best(false) {
            sep +=
                (cfg.separation_margin - distance_from_similarity(v, &model.similarity)).max(0.0);
        }
    }
    let n = cache.len() as f64;
    Ok(LossBreakdown::weighted(
        ce / n,
        clus / n,
        sep / n,
        diversity_loss(&model.prototypes, cfg.diversity_margin),
        l1_cross(&model.class_layer, &classes),
        cfg,
    ))
}

/// Class probabilities of every cached sample.
pub fn cached_probs(model: &ModelVersion, cache: &ActivationCache) -> Vec<[f64; 2]> {
    cache
        .samples
        .iter()
        .map(|s| softmax2(model.class_layer.logits(&s.maxsims)))
        .collect()
}

/// Full report of `model` on an aligned cache, at the default threshold.
pub fn evaluate(model: &ModelVersion, cache: &ActivationCache) -> Result<MetricsReport> {
    cache.check_alignment(model)?;
    let labels = cache.labels();
    let probs = cached_probs(model, cache);
    let (confusion, accuracy) = confusion_matrix(&probs, &labels, DEFAULT_THRESHOLD)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let (roc, auc) = roc_auc(&scores, &labels)?;
    Ok(MetricsReport {
        model_id: model.id.clone(),
        accuracy,
        confusion,
        roc,
        auc,
        loss: loss_from_cache(model, cache)?,
        n_samples: labels.len(),
        prototype_count: model.prototypes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use Label::{Manipulated as M, Pristine as P};

    #[test]
    fn confusion_examples() {
        let (c, acc) = confusion_matrix(&[[0.1, 0.9], [0.8, 0.2]], &[M, P], 0.5).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                tn: 1,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(acc, 1.0);
        let (c, acc) = confusion_matrix(&[[0.2, 0.8]; 4], &[P; 4], 0.5).unwrap();
        assert_eq!((c.fp, acc), (4, 0.0));
        let (c, _) = confusion_matrix(&[[1.0, 0.0], [0.7, 0.3]], &[P, M], 0.0).unwrap();
        assert_eq!(c.tp + c.fp, 2);
        let (c, _) = confusion_matrix(&[[0.5, 0.5]], &[M], 0.5).unwrap();
        assert_eq!(c.tp, 1);
        assert!(confusion_matrix(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        let (roc, auc) = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[M, M, P, P]).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(roc.first(), Some(&RocPoint { fpr: 0.0, tpr: 0.0 }));
        assert_eq!(roc.last(), Some(&RocPoint { fpr: 1.0, tpr: 1.0 }));
        let (roc, auc) = roc_auc(&[0.4; 6], &[M, P, M, P, P, M]).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(roc.len(), 2);
        assert!(roc_auc(&[0.1, 0.2], &[M, M]).is_err());
    }

    fn pairwise(scores: &[f64], labels: &[Label]) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == M && labels[j] == P {
                    pairs += 1;
                    twice += if a > b {
                        2
                    } else if a == b {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_matches_pairwise_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let labels: Vec<Label> = (0..20)
                .map(|i| {
                    if i < 2 {
                        Label::ALL[i]
                    } else {
                        Label::ALL[rng.random_range(0..2)]
                    }
                })
                .collect();
            let scores: Vec<f64> = (0..20)
                .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                .collect();
            assert_eq!(
                roc_auc(&scores, &labels).unwrap().1,
                pairwise(&scores, &labels)
            );
        }
    }

    proptest! {
        #[test]
        fn roc_invariants_and_rank_invariance(
            raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..40),
        ) {
            let mut labels: Vec<Label> = raw.iter().map(|(_, m)| if *m { M } else { P }).collect();
            labels[0] = M;
            labels[1] = P;
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 12.0).collect();
            let (roc, auc) = roc_auc(&scores, &labels).unwrap();
            prop_assert_eq!(auc, pairwise(&scores, &labels));
            prop_assert!((0.0..=1.0).contains(&auc));
            prop_assert_eq!(roc[0], RocPoint { fpr: 0.0, tpr: 0.0 });
            prop_assert_eq!(*roc.last().unwrap(), RocPoint { fpr: 1.0, tpr: 1.0 });
            prop_assert!(roc.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
            let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp() / (1.0 + (3.0 * s - 1.0).exp())).collect();
            let (roc2, auc2) = roc_auc(&squashed, &labels).unwrap();
            prop_assert_eq!(roc, roc2);
            prop_assert_eq!(auc, auc2);
        }

        #[test]
        fn accuracy_is_diagonal_fraction(raw in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 1..50)) {
            let probs: Vec<[f64; 2]> = raw.iter().map(|(p, _)| [1.0 - p, *p]).collect();
            let labels: Vec<Label> = raw.iter().map(|(_, m)| if *m { M } else { P }).collect();
            let (c, acc) = confusion_matrix(&probs, &labels, 0.5).unwrap();
            prop_assert_eq!(c.total(), raw.len());
            prop_assert_eq!(acc, (c.tp + c.tn) as f64 / raw.len() as f64);
        }
    }
}
