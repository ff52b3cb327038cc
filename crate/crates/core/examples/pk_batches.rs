//! Generates a synthetic identity set and draws a few PK batches from its
//! train split.

use std::collections::BTreeMap;

use amde::data::{DataConfig, IdentityDataset, PkSampler, PkSpec, Split};
use amde::seeding::derive_rng;

fn main() -> amde::Result<()> {
    let ds = IdentityDataset::generate(DataConfig {
        num_ids: 10,
        ..DataConfig::default()
    })?;
    for split in [Split::Train, Split::Gallery, Split::Query] {
        println!("{split:?}: {} images", ds.indices(split).len());
    }
    let sampler = PkSampler::new(&ds, PkSpec { p: 4, k: 3 })?;
    let mut rng = derive_rng(0, &[]);
    for b in 0..3 {
        let batch = sampler.sample(&mut rng);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &batch.labels {
            *counts.entry(l).or_default() += 1;
        }
        println!("batch {b}: labels {:?} counts {counts:?}", batch.labels);
    }
    Ok(())
}
