//! End-to-end acceptance checks at desk scale. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoforge::cache::ActivationCache;
use protoforge::datagen::{generate, generate_dataset, DataConfig, Dataset, Label, SampleSequence};
use protoforge::encoder::{encode, EncoderConfig};
use protoforge::explain::{prp_map, PrpConfig};
use protoforge::metrics::roc_auc;
use protoforge::numerics::{
    finite_diff_gradient, similarity, squared_distances, SimilarityConfig, Tensor,
};
use protoforge::pipeline::{evaluate_model, trace_video, train_model};
use protoforge::protonet::{
    compute_loss, encode_all, forward, loss_and_gradients, optimize_last_layer, project_prototypes,
    sum_contributions, train_from_scratch, ClassLayer, EncodedSample, LastLayerConfig,
    MaxsimMatrix, ModelVersion, TrainConfig,
};
use protoforge::refinery::{count_work, RefinementOp, RefinementSession};
use protoforge::video::{predict_video, videos_from_samples, PredictionTrace};

struct Desk {
    data: Dataset,
    train: Vec<EncodedSample>,
    test: Vec<EncodedSample>,
    model: ModelVersion,
    train_cache: ActivationCache,
    test_cache: ActivationCache,
    train_seconds: f64,
}

fn desk() -> Desk {
    let data = generate(&DataConfig::default()).unwrap();
    let enc = EncoderConfig::default();
    let start = Instant::now();
    let train = encode_all(&data.train, &enc).unwrap();
    let test = encode_all(&data.test, &enc).unwrap();
    let out = train_from_scratch(
        enc,
        SimilarityConfig::default(),
        TrainConfig::default(),
        &train,
        &test,
    )
    .unwrap();
    Desk {
        train_seconds: start.elapsed().as_secs_f64(),
        data,
        train,
        test,
        model: out.model,
        train_cache: out.train_cache,
        test_cache: out.test_cache,
    }
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- oracles

fn fresh_encode(samples: &[SampleSequence], enc: &EncoderConfig) -> Vec<EncodedSample> {
    samples
        .iter()
        .map(|s| EncodedSample {
            meta: s.meta(),
            latent: encode(s, enc).unwrap(),
        })
        .collect()
}

/// Best similarity per prototype by a direct scan over every cell.
fn scan_maxsims(m: &ModelVersion, s: &EncodedSample) -> Vec<f32> {
    m.prototypes
        .iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for h in 0..s.latent.rows() {
                for w in 0..s.latent.cols() {
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
            similarity(best, &m.similarity).unwrap() as f32
        })
        .collect()
}

/// Counts at threshold 0.5 on softmax probabilities computed here.
fn confusion_of(layer: &ClassLayer, rows: &[Vec<f32>], labels: &[Label]) -> [usize; 4] {
    let mut c = [0usize; 4]; // tp fp tn fn
    for (r, y) in rows.iter().zip(labels) {
        let mut l = [0.0f64; 2];
        for (w, &s) in layer.weights.iter().zip(r) {
            l[0] += w[0] as f64 * s as f64;
            l[1] += w[1] as f64 * s as f64;
        }
        let p1 = 1.0 / (1.0 + (l[0] - l[1]).exp());
        match (p1 >= 0.5, y) {
            (true, Label::Manipulated) => c[0] += 1,
            (true, Label::Pristine) => c[1] += 1,
            (false, Label::Pristine) => c[2] += 1,
            (false, Label::Manipulated) => c[3] += 1,
        }
    }
    c
}

/// Re-encodes every raw sample, recomputes every similarity by scanning and
/// retrains the class layer from the same starting weights.
fn full_recompute(
    base: &ModelVersion,
    op: &RefinementOp,
    data: &Dataset,
) -> (ClassLayer, [usize; 4]) {
    let tr = fresh_encode(&data.train, &base.encoder);
    let te = fresh_encode(&data.test, &base.encoder);
    let mut m = base.clone();
    match op {
        RefinementOp::Delete { ids } => {
            let keep: Vec<usize> = (0..m.prototypes.len())
                .filter(|&j| !ids.contains(&base.prototypes[j].id))
                .collect();
            m.prototypes = keep.iter().map(|&j| base.prototypes[j].clone()).collect();
            m.class_layer.weights = keep.iter().map(|&j| base.class_layer.weights[j]).collect();
        }
        RefinementOp::Replace { id, candidate } => {
            let s = tr
                .iter()
                .find(|s| s.meta.id == candidate.sample_id)
                .unwrap();
            let j = m.index_of(*id).unwrap();
            m.prototypes[j].vector = s.latent.patch(candidate.cell.0, candidate.cell.1).to_vec();
        }
        RefinementOp::Add { .. } => unreachable!("not drawn"),
    }
    let rows: Vec<Vec<f32>> = tr.iter().map(|s| scan_maxsims(&m, s)).collect();
    let labels: Vec<Label> = tr.iter().map(|s| s.meta.label).collect();
    let mm = MaxsimMatrix::new(m.prototypes.len(), rows, labels).unwrap();
    let fit = optimize_last_layer(
        &mm,
        &m.classes(),
        &m.train_config.last_layer(),
        &m.class_layer,
    )
    .unwrap();
    let test_rows: Vec<Vec<f32>> = te.iter().map(|s| scan_maxsims(&m, s)).collect();
    let test_labels: Vec<Label> = te.iter().map(|s| s.meta.label).collect();
    let c = confusion_of(&fit.layer, &test_rows, &test_labels);
    (fit.layer, c)
}

fn random_op(rng: &mut ChaCha8Rng, session: &RefinementSession, delete: bool) -> RefinementOp {
    let m = session.current();
    if delete {
        loop {
            let mut ids = m.prototype_ids();
            ids.shuffle(rng);
            ids.truncate(rng.random_range(1..=3));
            let survivors = |c: Label| {
                m.prototypes
                    .iter()
                    .filter(|p| p.class == c && !ids.contains(&p.id))
                    .count()
            };
            if survivors(Label::Pristine) > 0 && survivors(Label::Manipulated) > 0 {
                return RefinementOp::Delete { ids };
            }
        }
    }
    let ids = m.prototype_ids();
    let id = ids[rng.random_range(0..ids.len())];
    let cands = session.candidates_near(id, 25).unwrap();
    RefinementOp::Replace {
        id,
        candidate: cands[rng.random_range(0..cands.len())].reference(),
    }
}

// ---------------------------------------------------------------- criteria

fn fast_retrain_equivalence(d: &Desk) -> Outcome {
    let start = Instant::now();
    let mut session =
        RefinementSession::new(d.model.clone(), d.train_cache.clone(), d.test_cache.clone())
            .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut kinds: Vec<bool> = [vec![true; 20], vec![false; 10]].concat();
    kinds.shuffle(&mut rng);
    let (mut worst, mut mismatched, mut delete_work) = (0.0f64, 0, 0u64);
    for (i, &delete) in kinds.iter().enumerate() {
        let op = random_op(&mut rng, &session, delete);
        let (report, work) = count_work(|| session.dry_run(&op));
        let report = report.unwrap();
        if delete {
            delete_work += work.encodes + work.distance_maps;
        }
        let (layer, c) = full_recompute(session.current(), &op, &d.data);
        let gap = layer
            .weights
            .iter()
            .flatten()
            .zip(report.candidate.class_layer.weights.iter().flatten())
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
        let got = report.after.confusion;
        if [got.tp, got.fp, got.tn, got.fn_] != c {
            mismatched += 1;
        }
        // Let the base move so later ops start from refined versions.
        if i % 6 == 5 && report.candidate.prototypes.len() > 6 {
            session.commit(report).unwrap();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && mismatched == 0 && delete_work == 0 && secs < 300.0,
        format!(
            "30 ops: max weight gap {worst:.2e} (<= 1e-6), confusion mismatches {mismatched}, \
             encoder+distance work on deletions {delete_work}, {secs:.1} s (< 300 s)"
        ),
    )
}

fn latency(_: &Desk) -> Outcome {
    let data = generate(&DataConfig {
        train_samples: 500,
        test_samples: 200,
        seed: 42,
        ..Default::default()
    })
    .unwrap();
    let enc = EncoderConfig::default();
    let tr = encode_all(&data.train, &enc).unwrap();
    let te = encode_all(&data.test, &enc).unwrap();
    let cfg = TrainConfig {
        protos_per_class: 20,
        epochs: 10,
        ..TrainConfig::default()
    };
    let out = train_from_scratch(enc, SimilarityConfig::default(), cfg, &tr, &te).unwrap();
    let p = out.model.prototypes.len();
    let session = RefinementSession::new(out.model, out.train_cache, out.test_cache).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut time = |delete: bool| {
        (0..5)
            .map(|_| {
                let op = random_op(&mut rng, &session, delete);
                let t = Instant::now();
                session.dry_run(&op).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(0.0, f64::max)
    };
    let (del, rep) = (time(true), time(false));
    check(
        p == 40 && del < 1.0 && rep < 5.0,
        format!("500/200 samples, P={p}: slowest deletion dry run {:.0} ms (< 1000), slowest replacement {:.0} ms (< 5000)", del * 1e3, rep * 1e3),
    )
}

fn flatten(m: &ModelVersion) -> Tensor {
    let mut v: Vec<f32> = m
        .prototypes
        .iter()
        .flat_map(|p| p.vector.iter().copied())
        .collect();
    v.extend(m.class_layer.weights.iter().flatten());
    Tensor::new(vec![v.len()], v).unwrap()
}

fn unflatten(m: &ModelVersion, x: &Tensor) -> ModelVersion {
    let mut out = m.clone();
    let d = m.depth();
    let (pv, wv) = x.data().split_at(m.prototypes.len() * d);
    for (p, c) in out.prototypes.iter_mut().zip(pv.chunks_exact(d)) {
        p.vector = c.to_vec();
    }
    for (w, c) in out.class_layer.weights.iter_mut().zip(wv.chunks_exact(2)) {
        *w = [c[0], c[1]];
    }
    out
}

/// True when no discrete selection inside the loss (nearest cell, nearest own and
/// other-class prototype, active separation and diversity hinges) can flip under a
/// central difference with step `h`. One coordinate step moves a squared distance
/// by at most `2h|p_i - z_i| + h^2`; gaps must exceed four times that bound.
fn smooth_at(m: &ModelVersion, batch: &[(&protoforge::encoder::LatentMap, Label)], h: f64) -> bool {
    let cfg = &m.train_config;
    let gap = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        if v.len() > 1 {
            v[1] - v[0]
        } else {
            f64::INFINITY
        }
    };
    let mut spread = 0.0f64;
    for (latent, _) in batch {
        for p in &m.prototypes {
            for (z, q) in latent
                .grid
                .data()
                .chunks_exact(p.vector.len())
                .flat_map(|c| c.iter().zip(&p.vector))
            {
                spread = spread.max((*z as f64 - *q as f64).abs());
            }
        }
    }
    let step = 2.0 * h * spread + h * h;
    let mut margin = f64::INFINITY;
    for (latent, y) in batch {
        let mut dmin = Vec::new();
        for p in &m.prototypes {
            let mut d = squared_distances(&latent.grid, &p.vector).unwrap();
            margin = margin.min(gap(&mut d));
            dmin.push((d[0], p.class));
        }
        for same in [true, false] {
            let mut v: Vec<f64> = dmin
                .iter()
                .filter(|(_, c)| (c == y) == same)
                .map(|x| x.0)
                .collect();
            margin = margin.min(gap(&mut v));
            if !same {
                margin = margin.min((cfg.separation_margin - v[0]).abs());
            }
        }
    }
    if margin <= 4.0 * step {
        return false;
    }
    // |d cos / d p_i| <= 2 / |p|.
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    for (i, a) in m.prototypes.iter().enumerate() {
        for b in &m.prototypes[i + 1..] {
            if a.class == b.class {
                let dot: f64 = a
                    .vector
                    .iter()
                    .zip(&b.vector)
                    .map(|(x, y)| *x as f64 * *y as f64)
                    .sum();
                let bound = 2.0 * h * (2.0 / norm(&a.vector).min(norm(&b.vector)));
                if (dot / (norm(&a.vector) * norm(&b.vector)) - cfg.diversity_margin).abs()
                    <= 4.0 * bound
                {
                    return false;
                }
            }
        }
    }
    true
}

fn gradients(d: &Desk) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut accepted, mut draws, mut worst) = (0, 0, 0.0f64);
    while accepted < 10 && draws < 200 {
        draws += 1;
        let cfg = TrainConfig {
            seed: 1000 + draws,
            ..TrainConfig::default()
        };
        let mut m = ModelVersion::random(d.model.encoder.clone(), SimilarityConfig::default(), cfg)
            .unwrap();
        for w in &mut m.class_layer.weights {
            *w = [
                rng.random_range(-2.0f32..2.0),
                rng.random_range(-2.0f32..2.0),
            ];
        }
        m.train_config.lambda_sep = 0.3;
        m.train_config.diversity_margin = -0.5;
        let picks: Vec<&EncodedSample> = (0..2)
            .map(|_| &d.train[rng.random_range(0..d.train.len())])
            .collect();
        let batch: Vec<_> = picks.iter().map(|s| (&s.latent, s.meta.label)).collect();
        // Put the separation hinge just past the farthest other-class minimum so it is active.
        let far = batch
            .iter()
            .flat_map(|(l, y)| {
                m.prototypes
                    .iter()
                    .filter(move |p| p.class != *y)
                    .map(move |p| {
                        squared_distances(&l.grid, &p.vector)
                            .unwrap()
                            .into_iter()
                            .fold(f64::INFINITY, f64::min)
                    })
            })
            .fold(0.0, f64::max);
        m.train_config.separation_margin = far + 0.5;
        if !smooth_at(&m, &batch, 1e-3) {
            continue;
        }
        accepted += 1;
        let cfg = m.train_config.clone();
        let (_, g) = loss_and_gradients(&m, &batch, &cfg).unwrap();
        let mut analytic: Vec<f64> = g.prototypes.concat();
        analytic.extend(g.weights.iter().flatten());
        let numeric = finite_diff_gradient(
            |x| compute_loss(&unflatten(&m, x), &batch, &cfg).unwrap().total,
            &flatten(&m),
            1e-3,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            let n = *n as f64;
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-2));
        }
    }
    check(
        accepted == 10 && worst < 1e-4,
        format!("{accepted} points ({draws} draws), {} coordinates each: worst relative error {worst:.2e} (< 1e-4)", flatten(&d.model).len()),
    )
}

fn projection(d: &Desk) -> Outcome {
    let enc = &d.model.encoder;
    let fresh = fresh_encode(&d.data.train, enc);
    let random = ModelVersion::random(
        enc.clone(),
        SimilarityConfig::default(),
        TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let short = train_from_scratch(
        enc.clone(),
        SimilarityConfig::default(),
        TrainConfig {
            epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        },
        &d.train,
        &d.test,
    )
    .unwrap()
    .model;
    let models = [
        ("trained", d.model.clone()),
        (
            "projected random",
            project_prototypes(&random, &d.train).unwrap(),
        ),
        ("5 epochs", short),
    ];
    let mut checked = 0;
    for (name, m) in &models {
        for p in &m.prototypes {
            let src = p
                .source
                .as_ref()
                .ok_or(format!("{name}: {} has no source", p.id))?;
            let cited = fresh.iter().find(|s| s.meta.id == src.sample_id).unwrap();
            let d0: f64 = cited
                .latent
                .patch(src.cell.0, src.cell.1)
                .iter()
                .zip(&p.vector)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            if d0 != 0.0 {
                return Err(format!("{name}: {} is {d0:e} from its cited patch", p.id));
            }
            let mut best: Option<(f64, &str, usize, usize)> = None;
            for s in fresh.iter().filter(|s| s.meta.label == p.class) {
                for h in 0..s.latent.rows() {
                    for w in 0..s.latent.cols() {
                        let dd: f64 = s
                            .latent
                            .patch(h, w)
                            .iter()
                            .zip(&p.vector)
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum();
                        let key = (dd, s.meta.id.as_str(), h, w);
                        if best
                            .is_none_or(|b| key.partial_cmp(&b) == Some(std::cmp::Ordering::Less))
                        {
                            best = Some(key);
                        }
                    }
                }
            }
            let (bd, id, h, w) = best.unwrap();
            if bd != 0.0 || (id, (h, w)) != (src.sample_id.as_str(), src.cell) {
                return Err(format!(
                    "{name}: {} cites {}@{:?}, scan finds {id}@{:?} at {bd:e}",
                    p.id,
                    src.sample_id,
                    src.cell,
                    (h, w)
                ));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} prototypes over 3 projected models: distance 0 to the cited patch, which is the exhaustive-scan nearest"))
}

fn efficacy(d: &Desk) -> Outcome {
    let r = protoforge::metrics::evaluate(&d.model, &d.test_cache).unwrap();
    check(
        r.accuracy >= 0.90 && r.auc >= 0.95 && d.train_seconds < 600.0,
        format!(
            "200/100 seed 42: accuracy {:.4} (>= 0.90), AUC {:.4} (>= 0.95), {:.1} s (< 600 s)",
            r.accuracy, r.auc, d.train_seconds
        ),
    )
}

fn l1_behavior(d: &Desk) -> Outcome {
    let m = d.train_cache.matrix();
    let classes = d.model.classes();
    let split = |layer: &ClassLayer| {
        let (mut own, mut cross) = (0.0, 0.0);
        for (w, c) in layer.weights.iter().zip(&classes) {
            own += (w[c.index()] as f64).abs();
            cross += (w[c.other().index()] as f64).abs();
        }
        let n = classes.len() as f64;
        (own / n, cross / n)
    };
    let base = d.model.train_config.last_layer();
    let heavy = LastLayerConfig {
        lambda_l1: 1e3,
        ..base.clone()
    };
    let init = ClassLayer::class_identity(&classes);
    let (_, heavy_cross) = split(
        &optimize_last_layer(&m, &classes, &heavy, &init)
            .unwrap()
            .layer,
    );
    let (own, cross) = split(
        &optimize_last_layer(&m, &classes, &base, &init)
            .unwrap()
            .layer,
    );
    check(
        heavy_cross < 1e-3 && cross < own && base.lambda_l1 == 0.001,
        format!("lambda 1e3: mean |cross| {heavy_cross:.2e} (< 1e-3); lambda 0.001: mean |cross| {cross:.4} < mean |own| {own:.4}"),
    )
}

fn prp(d: &Desk) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut worst, mut leaked) = (0.0f64, 0usize);
    for _ in 0..10 {
        let s = &d.data.test[rng.random_range(0..d.data.test.len())];
        let j = rng.random_range(0..d.model.prototypes.len());
        let latent = encode(s, &d.model.encoder).unwrap();
        let f = forward(&d.model, &latent).unwrap();
        let map = prp_map(
            &d.model,
            s,
            &latent,
            d.model.prototypes[j].id,
            &PrpConfig::default(),
        )
        .unwrap();
        let seed = f.maxsims[j] as f64;
        worst = worst.max((map.input_mass() - seed).abs() / seed.abs());
        let (h, w) = f.argmax_cells[j];
        let rf = latent.receptive_field(h, w);
        for y in 0..s.height {
            for x in 0..s.width {
                let i = (y * s.width + x) as usize;
                if !rf.contains(x, y)
                    && (map.rgb[i] != 0.0 || map.flows.iter().any(|g| g[i] != 0.0))
                {
                    leaked += 1;
                }
            }
        }
    }
    check(
        worst <= 1e-3 && leaked == 0,
        format!("10 pairs: worst relative conservation error {worst:.2e} (<= 1e-3), nonzero pixels outside the receptive field {leaked}"),
    )
}

fn metrics_oracle(_: &Desk) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut bad = 0;
    for i in 0..50 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    Label::Manipulated
                } else {
                    Label::Pristine
                }
            })
            .collect();
        labels[0] = Label::Manipulated;
        labels[1] = Label::Pristine;
        // Coarse grids on odd draws force ties.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if i % 2 == 1 {
                    rng.random_range(0..6) as f64 / 5.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let (roc, auc) = roc_auc(&scores, &labels).unwrap();
        let (mut num, mut den) = (0u64, 0u64);
        for (a, la) in scores.iter().zip(&labels) {
            for (b, lb) in scores.iter().zip(&labels) {
                if *la == Label::Manipulated && *lb == Label::Pristine {
                    den += 2;
                    num += if a > b {
                        2
                    } else if a == b {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        let first = roc.first().map(|p| (p.fpr, p.tpr));
        let last = roc.last().map(|p| (p.fpr, p.tpr));
        if auc != num as f64 / den as f64 || first != Some((0.0, 0.0)) || last != Some((1.0, 1.0)) {
            bad += 1;
        }
    }
    check(
        bad == 0,
        format!("50 score sets: {bad} with AUC != pairwise estimator or missing (0,0)/(1,1)"),
    )
}

fn decomposition(d: &Desk) -> Outcome {
    let mut all = d.data.train.clone();
    all.extend(d.data.test.iter().cloned());
    let videos = videos_from_samples(&all).unwrap();
    let (mut windows, mut bad) = (0, 0);
    for v in &videos {
        let trace = predict_video(&d.model, v).unwrap();
        let parsed: PredictionTrace =
            serde_json::from_str(&serde_json::to_string(&trace).unwrap()).unwrap();
        for t in [&trace, &parsed] {
            for w in &t.windows {
                windows += 1;
                let mut l = [0.0f64; 2];
                for r in &w.contributions {
                    l[0] += r[0];
                    l[1] += r[1];
                }
                if l != w.logits || sum_contributions(&w.contributions) != w.logits {
                    bad += 1;
                }
            }
        }
    }
    check(
        bad == 0,
        format!("{} videos, {windows} windows (in memory and after JSON): {bad} where the contribution sum differs from the logit", videos.len()),
    )
}

fn determinism(_: &Desk) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&DataConfig::default(), &data).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        train_model(
            &data,
            out,
            TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
        )
        .unwrap();
    }
    let files = |root: &Path| {
        let mut v = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    v.push((
                        p.strip_prefix(root).unwrap().to_path_buf(),
                        std::fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        v.sort();
        v
    };
    let (fa, fb) = (files(&a), files(&b));
    let eval = |m: &Path| serde_json::to_vec_pretty(&evaluate_model(m, &data).unwrap()).unwrap();
    let trace = |m: &Path| {
        serde_json::to_vec_pretty(&trace_video(m, &data, "test-manipulated-0001").unwrap()).unwrap()
    };
    let train_same = fa == fb;
    let eval_same = eval(&a) == eval(&a) && eval(&a) == eval(&b);
    let trace_same = trace(&a) == trace(&a) && trace(&a) == trace(&b);
    check(
        train_same && eval_same && trace_same,
        format!(
            "train ({} files): {train_same}, eval JSON: {eval_same}, trace JSON: {trace_same}",
            fa.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let desk = desk();
    let criteria: [(&str, fn(&Desk) -> Outcome); 10] = [
        ("fast-retrain equivalence", fast_retrain_equivalence),
        ("refinement latency", latency),
        ("gradient correctness", gradients),
        ("projection contract", projection),
        ("training efficacy", efficacy),
        ("L1 behavior", l1_behavior),
        ("PRP conservation", prp),
        ("metrics oracle", metrics_oracle),
        ("decomposition losslessness", decomposition),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    println!();
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&desk))).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {name:<28} {detail} [{:.1} s]",
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of 10 passed in {:.1} s",
        10 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
