//! Erases a rectangle covering a fraction `s` of a synthetic image and prints
//! the mask.
//!
//! cargo run --example occlusion -- [s]

use amde::data::{random_erase_with_rect, DataConfig, IdentityDataset, OcclusionSpec};
use amde::seeding::derive_rng;

fn main() -> amde::Result<()> {
    let s: f64 = std::env::args()
        .nth(1)
        .map_or(0.3, |a| a.parse().expect("s must be a number"));
    let ds = IdentityDataset::generate(DataConfig {
        num_ids: 2,
        ..DataConfig::default()
    })?;
    let image = &ds.samples[0].image;
    let [_, rows, cols] = ds.config.input_shape;
    let mut rng = derive_rng(11, &[]);
    let (erased, rect) = random_erase_with_rect(image, &OcclusionSpec::new(s, 11), &mut rng)?;

    let Some(rect) = rect else {
        println!("s = {s}: nothing erased");
        return Ok(());
    };
    println!(
        "s = {s}: {}x{} rectangle at ({}, {}), {} of {} pixels",
        rect.height,
        rect.width,
        rect.top,
        rect.left,
        rect.area(),
        rows * cols
    );
    let changed = image
        .data()
        .iter()
        .zip(erased.data())
        .filter(|(a, b)| a != b)
        .count();
    println!("{changed} pixel values changed");
    for y in (0..rows).step_by(2) {
        let line: String = (0..cols)
            .map(|x| if rect.contains(y, x) { '#' } else { '.' })
            .collect();
        println!("{line}");
    }
    Ok(())
}
