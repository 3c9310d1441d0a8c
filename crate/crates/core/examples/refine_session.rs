//! Dry-runs deletions, replacements and an addition against cached
//! activations, commits some of them and compares versions.
//!
//! cargo run --release --example refine_session

use protoforge::datagen::{generate, DataConfig, Label};
use protoforge::encoder::EncoderConfig;
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, train_from_scratch, TrainConfig};
use protoforge::refinery::{count_work, RefinementOp, RefinementSession};

fn main() -> protoforge::Result<()> {
    let data = generate(&DataConfig::default())?;
    let enc = EncoderConfig::default();
    let train = encode_all(&data.train, &enc)?;
    let test = encode_all(&data.test, &enc)?;
    let out = train_from_scratch(
        enc,
        SimilarityConfig::default(),
        TrainConfig::default(),
        &train,
        &test,
    )?;
    let mut session = RefinementSession::new(out.model, out.train_cache, out.test_cache)?;
    let m = session.current().clone();
    println!(
        "{}: accuracy {:.4}, AUC {:.4}",
        m.id,
        session.metrics().accuracy,
        session.metrics().auc
    );

    // The manipulated prototype the model leans on most.
    let strongest = m
        .prototypes
        .iter()
        .zip(&m.class_layer.weights)
        .filter(|(p, _)| p.class == Label::Manipulated)
        .max_by(|a, b| a.1[1].total_cmp(&b.1[1]))
        .map(|(p, _)| p.id)
        .unwrap();
    let delete = RefinementOp::Delete {
        ids: vec![strongest],
    };
    let (report, work) = count_work(|| session.dry_run(&delete));
    let report = report?;
    println!(
        "dry run {}: accuracy {:.4} -> {:.4}, {:?} -> {:?}, {:.1} ms, {} encodes, {} distance maps",
        delete.describe(),
        report.before.accuracy,
        report.after.accuracy,
        report.before.confusion,
        report.after.confusion,
        report.elapsed_ms,
        work.encodes,
        work.distance_maps
    );

    let target = m.prototype_ids()[0];
    let candidates = session.candidates_near(target, 3)?;
    for c in &candidates {
        println!(
            "candidate for {target}: {} cell {:?} at {:.4}",
            c.source.sample_id, c.source.cell, c.distance
        );
    }
    let replace = RefinementOp::Replace {
        id: target,
        candidate: candidates[0].reference(),
    };
    let report = session.dry_run(&replace)?;
    println!(
        "dry run {}: AUC {:.4} -> {:.4}, {:.1} ms",
        replace.describe(),
        report.before.auc,
        report.after.auc,
        report.elapsed_ms
    );
    let v1 = session.commit(report)?;

    let add = RefinementOp::Add {
        candidate: candidates[1].reference(),
    };
    let report = session.dry_run(&add)?;
    println!("radar axes {:?}", report.radar.axes);
    println!("radar deltas {:?}", report.radar.deltas);
    let v2 = session.commit(report)?;

    for v in session.versions() {
        let r = session.evaluate_version(&v.id)?;
        println!(
            "{:<3} parent {:<4} {:<40} accuracy {:.4} AUC {:.4}",
            v.id,
            v.parent_id.as_deref().unwrap_or("-"),
            v.note,
            r.accuracy,
            r.auc
        );
    }
    println!(
        "committed {v1} and {v2}; initial model retained as {}",
        session.initial().id
    );
    Ok(())
}
