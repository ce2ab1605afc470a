//! Labelled face images: the UTKFace file convention, the per-race split
//! protocol, and a synthetic generator with a controllable race/gender
//! confound.
//!
//! Label conventions: gender 0 = male, 1 = female; race 0..4 = White, Black,
//! Asian, Indian, Others.

mod split;
mod synth;
mod utk;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub use split::{make_splits, DatasetSplit, SplitManifest};
pub use synth::{gen_synthetic, read_synthetic, write_synthetic, SynthConfig, SynthEntry};
pub use utk::{load_dataset, parse_utk_filename, write_utk_images, LoadReport, UTK_RACES};

pub const GENDERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `[C, H, W]`, values in `[-1, 1]`.
    pub image: Tensor,
    pub gender: usize,
    pub race: usize,
    pub age: Option<u32>,
    pub source_id: String,
}

/// SHA-256 over ids, labels, shapes and pixel bits, in record order.
pub fn manifest_hash(records: &[SampleRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update((r.source_id.len() as u64).to_le_bytes());
        h.update(r.source_id.as_bytes());
        h.update((r.gender as u64).to_le_bytes());
        h.update((r.race as u64).to_le_bytes());
        h.update(r.age.map_or(u64::MAX, u64::from).to_le_bytes());
        for &d in r.image.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in r.image.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Per-race fractions of a record list.
pub fn race_frequencies(races: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &r in races {
        counts[r] += 1;
    }
    counts.iter().map(|&c| c as f64 / races.len().max(1) as f64).collect()
}

/// Column-wise view of a record list: one `[N, C, H, W]` tensor plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub genders: Vec<usize>,
    pub races: Vec<usize>,
    pub source_ids: Vec<String>,
}

impl ImageSet {
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        ensure!(!records.is_empty(), "image set needs at least one record");
        let images = Tensor::stack(&records.iter().map(|r| &r.image).collect::<Vec<_>>())?;
        Ok(Self {
            images,
            genders: records.iter().map(|r| r.gender).collect(),
            races: records.iter().map(|r| r.race).collect(),
            source_ids: records.iter().map(|r| r.source_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.races.len()
    }

    pub fn is_empty(&self) -> bool {
        self.races.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(rows)?,
            genders: rows.iter().map(|&i| self.genders[i]).collect(),
            races: rows.iter().map(|&i| self.races[i]).collect(),
            source_ids: rows.iter().map(|&i| self.source_ids[i].clone()).collect(),
        })
    }
}
