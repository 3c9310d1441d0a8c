//! Persists versions with their caches, reopens the store and walks the lineage.
//!
//! cargo run --release --example version_store -- [STORE_DIR]

use std::path::PathBuf;

use protoforge::datagen::{generate, DataConfig};
use protoforge::encoder::EncoderConfig;
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, train_from_scratch, TrainConfig};
use protoforge::refinery::RefinementSession;
use protoforge::store::VersionStore;

fn main() -> protoforge::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("protoforge-store"));
    if root.exists() {
        std::fs::remove_dir_all(&root)
            .map_err(|e| protoforge::Error::InvalidArgument(e.to_string()))?;
    }
    let data = generate(&DataConfig {
        train_samples: 100,
        test_samples: 50,
        ..DataConfig::default()
    })?;
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
    let store = VersionStore::create(&root, &out.model, &out.train_cache, &out.test_cache)?;

    let mut session = RefinementSession::open(store)?;
    for _ in 0..2 {
        let id = session.current().prototype_ids()[0];
        session.delete_prototypes(&[id], false)?;
    }
    session.checkout("v1")?;
    let cand = session.candidates_near(session.current().prototype_ids()[0], 1)?;
    session.add_prototype(&cand[0].reference(), false)?;

    let reopened = RefinementSession::open(VersionStore::open(&root)?)?;
    let lineage = reopened.store().expect("store-backed").lineage()?;
    println!("head {}", lineage.head);
    for v in &lineage.versions {
        let m = reopened.evaluate_version(&v.id)?;
        println!(
            "{:<3} <- {:<4} {:<30} accuracy {:.4}",
            v.id,
            v.parent_id.as_deref().unwrap_or("-"),
            v.note,
            m.accuracy
        );
    }
    println!(
        "ancestry of {}: {:?}",
        lineage.head,
        lineage.ancestry(&lineage.head)
    );
    Ok(())
}
