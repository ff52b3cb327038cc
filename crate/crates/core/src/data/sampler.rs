use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthetic::{IdentityDataset, Split};
use crate::error::{Error, Result};

/// `P` identities × `K` images per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkSpec {
    pub p: usize,
    pub k: usize,
}

impl PkSpec {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "PK batches need P ≥ 2 and K ≥ 2, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Dataset indices and labels of one PK batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PkBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Train images grouped by identity, ready for repeated sampling.
#[derive(Clone, Debug)]
pub struct PkSampler {
    spec: PkSpec,
    by_id: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(dataset: &IdentityDataset, spec: PkSpec) -> Result<Self> {
        spec.validate()?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
        for (i, s) in dataset.samples.iter().enumerate() {
            if s.split == Split::Train {
                groups[s.label].push(i);
            }
        }
        let by_id: Vec<(usize, Vec<usize>)> = groups
            .into_iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .collect();
        if by_id.len() < spec.p {
            return Err(Error::Sampling {
                anchor: 0,
                reason: format!(
                    "only {} identities have train images, P = {}",
                    by_id.len(),
                    spec.p
                ),
            });
        }
        Ok(Self { spec, by_id })
    }

    /// Picks `P` distinct identities, then `K` images of each (with
    /// replacement only when an identity has fewer than `K`), shuffled.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PkBatch {
        let mut pairs = Vec::with_capacity(self.spec.batch_size());
        for (label, images) in self.by_id.choose_multiple(rng, self.spec.p) {
            if images.len() >= self.spec.k {
                for &i in images.choose_multiple(rng, self.spec.k) {
                    pairs.push((i, *label));
                }
            } else {
                for _ in 0..self.spec.k {
                    let &i = images.choose(rng).expect("groups are non-empty");
                    pairs.push((i, *label));
                }
            }
        }
        pairs.shuffle(rng);
        let (indices, labels) = pairs.into_iter().unzip();
        PkBatch { indices, labels }
    }
}

/// One PK batch from `dataset`'s train split.
pub fn pk_sample<R: Rng + ?Sized>(
    dataset: &IdentityDataset,
    spec: PkSpec,
    rng: &mut R,
) -> Result<PkBatch> {
    Ok(PkSampler::new(dataset, spec)?.sample(rng))
}
