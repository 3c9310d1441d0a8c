//! Traces a test video window by window and breaks a frame range down by prototype.
//!
//! cargo run --release --example video_trace

use protoforge::datagen::{generate, DataConfig, Label};
use protoforge::encoder::EncoderConfig;
use protoforge::numerics::SimilarityConfig;
use protoforge::protonet::{encode_all, sum_contributions, train_from_scratch, TrainConfig};
use protoforge::video::{aggregate, predict_video, top_contributors, videos_from_samples};

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

    let videos = videos_from_samples(&data.test)?;
    let video = videos
        .iter()
        .find(|v| v.label == Label::Manipulated)
        .expect("a manipulated video");
    let trace = predict_video(&model, video)?;
    println!(
        "{} ({} frames, {} windows)",
        video.id,
        video.frame_count(),
        trace.windows.len()
    );
    for w in &trace.windows {
        let exact = sum_contributions(&w.contributions) == w.logits;
        println!(
            "  window {} frames {:?}: p(manipulated) {:.4}, contributions sum to logits: {exact}",
            w.t, w.frame_span, w.probs[1]
        );
    }

    let (start, end) = (5, 24);
    let agg = aggregate(&trace, start, end)?;
    println!(
        "frames {start}-{end} touch windows {:?}; mean p(manipulated) {:.4}",
        agg.windows, agg.mean_probs[1]
    );
    for c in top_contributors(&trace, start, end, Label::Manipulated, 3)? {
        println!(
            "  {} contributes {:+.4} toward manipulated",
            c.prototype_id, c.mean_contribution
        );
    }
    Ok(())
}
