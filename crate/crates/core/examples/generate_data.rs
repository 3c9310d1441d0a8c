//! Writes the default synthetic dataset and summarizes what was planted.
//!
//! cargo run --release --example generate_data -- [OUT_DIR]

use std::path::PathBuf;

use protoforge::datagen::{generate_dataset, load_sample, DataConfig, Split};

fn main() -> protoforge::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("protoforge-data"));
    let manifest = generate_dataset(&DataConfig::default(), &out)?;
    println!("{} samples in {}", manifest.samples.len(), out.display());
    println!(
        "train: {} pristine, {} manipulated",
        manifest.train.pristine, manifest.train.manipulated
    );
    println!(
        "test:  {} pristine, {} manipulated",
        manifest.test.pristine, manifest.test.manipulated
    );

    for r in manifest.records(Split::Train).take(6) {
        let s = load_sample(&out.join(&r.path))?;
        match &s.artifact {
            Some(a) => println!(
                "{:<28} {:?} near {:?} at {:?}",
                s.id, a.kind, a.landmark, a.bbox
            ),
            None => println!("{:<28} pristine", s.id),
        }
    }
    Ok(())
}
