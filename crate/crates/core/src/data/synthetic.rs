use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seeding::derive_rng;

/// Which evaluation role an image plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Position of the image among its identity's images.
    pub index: usize,
    pub split: Split,
}

/// Parameters of the synthetic identity generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub noise_sigma: f64,
    /// Weight of each band's constant identity level.
    pub band_level: f64,
    /// Amplitude of each band's identity sinusoid.
    pub texture_amplitude: f64,
    /// Half-width of the uniform per-image brightness offset.
    pub brightness_shift: f64,
    pub input_shape: [usize; 3],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_ids: 32,
            imgs_per_id: 20,
            noise_sigma: 0.3,
            band_level: 0.6,
            texture_amplitude: 0.4,
            brightness_shift: 0.1,
            input_shape: [1, 64, 32],
            seed: 0,
        }
    }
}

/// Labelled images with train/query/gallery roles.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    pub config: DataConfig,
    pub samples: Vec<Sample>,
}

/// Number of horizontal bands in a prototype.
const BANDS: usize = 8;

/// Per-identity split sizes `(train, gallery, query)`.
pub fn split_sizes(imgs_per_id: usize) -> (usize, usize, usize) {
    let query = (imgs_per_id / 4).max(1);
    let rest = imgs_per_id - query;
    let mut train = rest.div_ceil(2);
    let mut gallery = rest - train;
    if gallery == 0 {
        train -= 1;
        gallery = 1;
    }
    (train, gallery, query)
}

/// Band type `t`: a level evenly spaced over `[-1, 1]` and a horizontal
/// sinusoid whose frequency and phase depend on `t`.
fn band_type(t: usize) -> (f64, f64, f64) {
    let level = -1.0 + 2.0 * t as f64 / (BANDS - 1) as f64;
    let freq = (1 + t / 2) as f64;
    let phase = (t % 2) as f64 * std::f64::consts::FRAC_PI_2;
    (level, freq, phase)
}

/// One distinct top-to-bottom ordering of the band types per identity.
/// Every identity uses each type exactly once, so identities differ only in
/// row order.
fn band_orders(seed: u64, num_ids: usize) -> Vec<[usize; BANDS]> {
    let mut rng = derive_rng(seed, &[0x5052_4f54]);
    let mut orders: Vec<[usize; BANDS]> = Vec::with_capacity(num_ids);
    while orders.len() < num_ids {
        let mut order: [usize; BANDS] = std::array::from_fn(|i| i);
        order[1..BANDS - 1].shuffle(&mut rng);
        if !orders.contains(&order) {
            orders.push(order);
        }
    }
    orders
}

fn prototype(config: &DataConfig, order: &[usize; BANDS]) -> Tensor {
    let [channels, height, width] = config.input_shape;
    let mut data = Vec::with_capacity(channels * height * width);
    for ch in 0..channels {
        for r in 0..height {
            let band = (r * BANDS / height).min(BANDS - 1);
            let (level, freq, phase) = band_type(order[band]);
            // Position inside the band in (0, 1); the envelope fades every
            // band to zero at its edges so neighbouring bands do not touch.
            let start = band * height / BANDS;
            let rows = ((band + 1) * height / BANDS - start).max(1);
            let u = (r - start) as f64 / rows as f64 + 0.5 / rows as f64;
            let envelope = (std::f64::consts::PI * u).sin();
            for c in 0..width {
                let x = c as f64 / width as f64;
                let texture = (std::f64::consts::TAU * freq * x + phase + ch as f64).sin();
                data.push(
                    envelope * (config.band_level * level + config.texture_amplitude * texture),
                );
            }
        }
    }
    Tensor::new(vec![channels, height, width], data).expect("prototype shape is consistent")
}

impl IdentityDataset {
    /// Deterministic synthetic dataset: prototype plus Gaussian pixel noise
    /// plus a uniform per-image brightness offset.
    pub fn generate(config: DataConfig) -> Result<Self> {
        if config.num_ids < 2 || config.imgs_per_id < 2 {
            return Err(Error::contract(format!(
                "need at least 2 identities and 2 images per identity, got {} × {}",
                config.num_ids, config.imgs_per_id
            )));
        }
        let max_ids: usize = (1..=BANDS - 2).product();
        if config.num_ids > max_ids {
            return Err(Error::contract(format!(
                "at most {max_ids} distinct band orders exist, {} identities requested",
                config.num_ids
            )));
        }
        if config.noise_sigma.is_nan()
            || config.noise_sigma < 0.0
            || config.brightness_shift.is_nan()
            || config.brightness_shift < 0.0
        {
            return Err(Error::contract(
                "noise and brightness ranges must be non-negative",
            ));
        }
        if config.input_shape.contains(&0) {
            return Err(Error::contract("image extents must be positive"));
        }
        let noise = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| Error::contract(format!("noise distribution: {e}")))?;
        let (train, gallery, _) = split_sizes(config.imgs_per_id);
        let orders = band_orders(config.seed, config.num_ids);
        let mut samples = Vec::with_capacity(config.num_ids * config.imgs_per_id);
        for (id, order) in orders.iter().enumerate() {
            let proto = prototype(&config, order);
            for index in 0..config.imgs_per_id {
                let mut rng = derive_rng(config.seed, &[0x494d_4147, id as u64, index as u64]);
                let shift = if config.brightness_shift > 0.0 {
                    rng.random_range(-config.brightness_shift..config.brightness_shift)
                } else {
                    0.0
                };
                let mut image = proto.clone();
                if config.noise_sigma > 0.0 || shift != 0.0 {
                    for v in image.data_mut() {
                        let n = if config.noise_sigma > 0.0 {
                            noise.sample(&mut rng)
                        } else {
                            0.0
                        };
                        *v += n + shift;
                    }
                }
                let split = if index < train {
                    Split::Train
                } else if index < train + gallery {
                    Split::Gallery
                } else {
                    Split::Query
                };
                samples.push(Sample {
                    image,
                    label: id,
                    index,
                    split,
                });
            }
        }
        Ok(Self { config, samples })
    }

    /// Noise-free prototype of identity `id`.
    pub fn prototype(&self, id: usize) -> Tensor {
        prototype(&self.config, &band_orders(self.config.seed, id + 1)[id])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_ids
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn images(&self, indices: &[usize]) -> Vec<Tensor> {
        indices
            .iter()
            .map(|&i| self.samples[i].image.clone())
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Checks the structural invariants of the splits.
    pub fn validate(&self) -> Result<()> {
        let mut in_gallery = vec![false; self.config.num_ids];
        for s in &self.samples {
            if s.label >= self.config.num_ids {
                return Err(Error::contract(format!("label {} out of range", s.label)));
            }
            if s.image.shape() != self.config.input_shape {
                return Err(Error::Dimension {
                    op: "dataset image",
                    lhs: self.config.input_shape.to_vec(),
                    rhs: s.image.shape().to_vec(),
                });
            }
            if s.split == Split::Gallery {
                in_gallery[s.label] = true;
            }
        }
        for s in &self.samples {
            if s.split == Split::Query && !in_gallery[s.label] {
                return Err(Error::contract(format!(
                    "query identity {} has no gallery image",
                    s.label
                )));
            }
        }
        Ok(())
    }
}
