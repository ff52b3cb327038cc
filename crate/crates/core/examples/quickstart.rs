//! Trains the default two-branch encoder with the joint loss on synthetic
//! identities and reports clean and occluded retrieval accuracy.
//!
//! cargo run --release --example quickstart -- [seed] [epochs]

use std::time::Instant;

use amde::engine::{evaluate, train, TrainConfig};

fn main() -> amde::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = TrainConfig::default();
    if let Some(seed) = args.next() {
        config.seed = seed.parse().expect("seed must be an integer");
    }
    if let Some(epochs) = args.next() {
        config.epochs = epochs.parse().expect("epochs must be an integer");
    }

    let start = Instant::now();
    let outcome = train(&config)?;
    println!(
        "trained {} epochs in {:.1?}",
        config.epochs,
        start.elapsed()
    );
    for e in &outcome.log.epochs {
        println!(
            "epoch {:>2}  loss {:.4}  softmax {:.4}  metric {:.4}  clamps {}",
            e.epoch,
            e.total,
            e.softmax,
            e.metric.unwrap_or(0.0),
            e.clamp_events
        );
    }

    for row in evaluate(
        &outcome.checkpoint,
        &outcome.dataset,
        &config.occlusion_eval_s,
    )? {
        println!(
            "s={:<4} rank1={:.3} rank5={:.3} mAP={:.3}",
            row.s, row.rank1, row.rank5, row.map
        );
    }
    Ok(())
}
