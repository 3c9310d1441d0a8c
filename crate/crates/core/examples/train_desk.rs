//! Trains the default model on the desk dataset and reports test metrics.
//!
//! cargo run --release --example train_desk

use std::time::Instant;

use protoforge::datagen::{generate, DataConfig};
use protoforge::encoder::EncoderConfig;
use protoforge::metrics::evaluate;
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, train_from_scratch, TrainConfig};

fn main() -> protoforge::Result<()> {
    let data = generate(&DataConfig::default())?;
    let enc = EncoderConfig::default();
    let start = Instant::now();
    let train = encode_all(&data.train, &enc)?;
    let test = encode_all(&data.test, &enc)?;
    let out = train_from_scratch(
        enc,
        SimilarityConfig::default(),
        TrainConfig::default(),
        &train,
        &test,
    )?;
    println!("trained in {:.2} s", start.elapsed().as_secs_f64());

    for e in out.history.iter().filter(|e| e.projected) {
        println!(
            "epoch {:>3}  loss {:.4}  (projected)",
            e.epoch, e.loss.total
        );
    }
    let r = evaluate(&out.model, &out.test_cache)?;
    println!("test accuracy {:.4}  AUC {:.4}", r.accuracy, r.auc);
    println!("{:?}", r.confusion);
    for (p, w) in out
        .model
        .prototypes
        .iter()
        .zip(&out.model.class_layer.weights)
    {
        let src = p.source.as_ref().expect("projected");
        println!(
            "{} {:<11} w={:+.3}/{:+.3}  from {} cell {:?}",
            p.id, p.class, w[0], w[1], src.sample_id, src.cell
        );
    }
    Ok(())
}
