//! Small ablation grid over a few variants and seeds, printed as the
//! aggregate table.
//!
//! cargo run --release --example ablation

use amde::data::DataConfig;
use amde::encoder::EncoderConfig;
use amde::engine::{ablate_variants, ablation_seeds, TrainConfig, Variant};

fn main() {
    let base = TrainConfig {
        epochs: 3,
        steps_per_epoch: 20,
        encoder: EncoderConfig {
            num_classes: 8,
            ..EncoderConfig::default()
        },
        data: DataConfig {
            num_ids: 8,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    };
    let variants = [
        Variant::RnS,
        Variant::RnA,
        Variant::RnLstmS,
        Variant::RnLstmA,
    ];
    let report = ablate_variants(&base, &variants, &ablation_seeds(0, 2), 2);
    print!("{}", report.summary_csv());
    for f in &report.failures {
        eprintln!("{} seed {}: {}", f.variant, f.seed, f.error);
    }
}
