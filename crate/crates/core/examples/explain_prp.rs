//! Propagates one prototype's similarity back to input pixels and renders the overlay.
//!
//! cargo run --release --example explain_prp -- [OUT_DIR]

use std::path::PathBuf;

use protoforge::datagen::{generate, DataConfig, Label};
use protoforge::encoder::{encode, EncoderConfig};
use protoforge::explain::{prp_map, PrpConfig};
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, forward, train_from_scratch, TrainConfig};
use protoforge::render::{prototype_strip, prp_overlay, save_png};

fn main() -> protoforge::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("protoforge-prp"));
    let data = generate(&DataConfig::default())?;
    let enc = EncoderConfig::default();
    let train = encode_all(&data.train, &enc)?;
    let test = encode_all(&data.test, &enc)?;
    let model = train_from_scratch(
        enc.clone(),
        SimilarityConfig::default(),
        TrainConfig::default(),
        &train,
        &test,
    )?
    .model;

    let sample = data
        .test
        .iter()
        .find(|s| s.label == Label::Manipulated)
        .expect("manipulated sample");
    let latent = encode(sample, &enc)?;
    let f = forward(&model, &latent)?;
    let j = (0..model.prototypes.len())
        .filter(|&j| model.prototypes[j].class == Label::Manipulated)
        .max_by(|&a, &b| f.maxsims[a].total_cmp(&f.maxsims[b]))
        .expect("manipulated prototype");
    let proto = &model.prototypes[j];
    let map = prp_map(&model, sample, &latent, proto.id, &PrpConfig::default())?;
    let artifact = sample.artifact.as_ref().expect("planted artifact");
    println!(
        "{} on {}: maxsim {:.4}, relevance {:.4}",
        proto.id,
        sample.id,
        f.maxsims[j],
        map.input_mass()
    );
    println!(
        "rgb share {:.3}, flow share {:.3}",
        map.rgb_mass() / map.input_mass(),
        map.flow_mass() / map.input_mass()
    );
    println!(
        "receptive field {:?}; planted {:?} at {:?}",
        map.bbox, artifact.kind, artifact.bbox
    );

    let source = data
        .train
        .iter()
        .find(|s| Some(&s.id) == proto.source.as_ref().map(|x| &x.sample_id))
        .expect("source");
    save_png(&prp_overlay(sample, &map)?, &out.join("overlay.png"))?;
    save_png(&prototype_strip(proto, source)?, &out.join("prototype.png"))?;
    println!("wrote {}", out.display());
    Ok(())
}
