//! Synthetic identity data, PK batch sampling and random-erase occlusion.

mod io;
mod occlusion;
mod sampler;
mod synthetic;

pub use io::{export_dataset, import_dataset, sample_file_name, META_FILE};
pub use occlusion::{
    random_erase, random_erase_with_rect, rectangle_shapes, EraseRect, Fill, OcclusionSpec,
};
pub use sampler::{pk_sample, PkBatch, PkSampler, PkSpec};
pub use synthetic::{split_sizes, DataConfig, IdentityDataset, Sample, Split};
