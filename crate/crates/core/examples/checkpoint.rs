//! Trains briefly, writes a checkpoint, reads it back and shows that the
//! restored model scores identically. Also shows a corrupted file being
//! rejected.

use amde::data::DataConfig;
use amde::encoder::EncoderConfig;
use amde::engine::{evaluate, parameter_checksum, train, Checkpoint, TrainConfig};

fn main() -> amde::Result<()> {
    let config = TrainConfig {
        epochs: 2,
        steps_per_epoch: 10,
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
    let outcome = train(&config)?;
    let dir = std::env::temp_dir().join("amde-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| amde::Error::io(&dir, e))?;
    let path = dir.join("model.amde");
    outcome.checkpoint.save(&path)?;

    let loaded = Checkpoint::load(&path)?;
    println!(
        "epoch {}  final loss {:.4}  checksum {:08x} -> {:08x}",
        loaded.epoch,
        loaded.final_loss,
        parameter_checksum(&outcome.model),
        parameter_checksum(&loaded.model()?)
    );
    let before = evaluate(&outcome.checkpoint, &outcome.dataset, &[0.0])?;
    let after = evaluate(&loaded, &outcome.dataset, &[0.0])?;
    println!("rank1 {:.3} / {:.3}", before[0].rank1, after[0].rank1);

    let mut bytes = loaded.to_bytes()?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    match Checkpoint::from_bytes(&bytes) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("flipped one bit: {e}"),
    }
    Ok(())
}
