//! Generates the synthetic sinusoid dataset (10 classes, 40 samples each,
//! 6 auxiliary / 4 held-out split) used by the end-to-end tests.
//!
//! Usage: cargo run -p sigmetric --example synth_dataset [-- DIR]

use sigmetric::synth::{write_synthetic_dataset, SynthSpec};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/synthetic".to_string());
    let ds = write_synthetic_dataset(&SynthSpec::default(), &dir).expect("dataset generation");
    println!("manifest: {}", ds.manifest_path.display());
    println!("protocol: {}", ds.protocol_path.display());
    println!("aux classes:  {}", ds.protocol.aux_classes.join(", "));
    println!("eval classes: {}", ds.protocol.eval_classes.join(", "));
}
