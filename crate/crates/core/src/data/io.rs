//! Dataset directories: `meta.json` plus one raw little-endian `f64` file
//! per image, named `<id>_<index>.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synthetic::{DataConfig, IdentityDataset, Sample, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    num_images: usize,
    num_ids: usize,
    input_shape: [usize; 3],
    seed: u64,
    generator: DataConfig,
    samples: Vec<SampleMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleMeta {
    label: usize,
    index: usize,
    split: Split,
    file: String,
}

pub fn sample_file_name(label: usize, index: usize) -> String {
    format!("{label}_{index}.bin")
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn export_dataset(dataset: &IdentityDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let file = sample_file_name(s.label, s.index);
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        samples.push(SampleMeta {
            label: s.label,
            index: s.index,
            split: s.split,
            file,
        });
    }
    let meta = Meta {
        num_images: dataset.len(),
        num_ids: dataset.config.num_ids,
        input_shape: dataset.config.input_shape,
        seed: dataset.config.seed,
        generator: dataset.config.clone(),
        samples,
    };
    let path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset written by [`export_dataset`].
pub fn import_dataset(dir: &Path) -> Result<IdentityDataset> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text)?;
    if meta.samples.len() != meta.num_images {
        return Err(Error::contract(format!(
            "meta.json lists {} samples but declares {}",
            meta.samples.len(),
            meta.num_images
        )));
    }
    let shape = meta.input_shape;
    let expected_bytes = shape.iter().product::<usize>() * 8;
    let mut samples = Vec::with_capacity(meta.num_images);
    for sm in meta.samples {
        let path = dir.join(&sm.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != expected_bytes {
            return Err(Error::contract(format!(
                "{} holds {} bytes, expected {expected_bytes}",
                path.display(),
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        samples.push(Sample {
            image: Tensor::new(shape.to_vec(), data)?,
            label: sm.label,
            index: sm.index,
            split: sm.split,
        });
    }
    let mut config = meta.generator;
    config.num_ids = meta.num_ids;
    config.input_shape = shape;
    config.seed = meta.seed;
    let ds = IdentityDataset { config, samples };
    ds.validate()?;
    Ok(ds)
}
