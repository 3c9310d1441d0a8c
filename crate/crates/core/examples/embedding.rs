//! 2D maps of prototypes and their nearest candidates, plus where prototypes sit on the face.
//!
//! cargo run --release --example embedding

use protoforge::cache::ActivationCache;
use protoforge::datagen::{generate, DataConfig, LandmarkName, Split};
use protoforge::encoder::EncoderConfig;
use protoforge::explain::{landmark_density, project_2d, ProjectionMethod};
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, train_from_scratch, TrainConfig};
use protoforge::refinery::{rank_candidates, PatchIndex};

fn main() -> protoforge::Result<()> {
    let data = generate(&DataConfig::default())?;
    let enc = EncoderConfig::default();
    let train = encode_all(&data.train, &enc)?;
    let test = encode_all(&data.test, &enc)?;
    let model = train_from_scratch(
        enc,
        SimilarityConfig::default(),
        TrainConfig::default(),
        &train,
        &test,
    )?
    .model;
    let index = PatchIndex::build(&ActivationCache::build(&model, Split::Train, &train)?);

    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for p in &model.prototypes {
        labels.push(format!("{} {}", p.id, p.class));
        vectors.push(p.vector.clone());
        for c in rank_candidates(&model, &index, p.id, 3)? {
            labels.push(format!("  near {}", p.id));
            vectors.push(index.get(&c.reference())?.vector.clone());
        }
    }
    for method in [ProjectionMethod::Pca, ProjectionMethod::NeighborEmbed] {
        println!("{method:?}");
        for (l, [x, y]) in labels.iter().zip(project_2d(&vectors, method, 7)?).take(8) {
            println!("  {l:<24} ({x:+.3}, {y:+.3})");
        }
    }
    let density = landmark_density(&model)?;
    for name in LandmarkName::ALL {
        println!("{name:?}: {}", density.count(name));
    }
    Ok(())
}
