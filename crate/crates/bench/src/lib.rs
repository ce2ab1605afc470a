//! Fixtures shared by the criterion benches.

use fairfader_core::data::{gen_synthetic, ImageSet, SynthConfig};
use fairfader_core::{ArchSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random::<f32>() * 2.0 - 1.0)
}

/// `n` desk-sized synthetic images with balanced races.
pub fn desk_batch(n: usize) -> ImageSet {
    let spec = ArchSpec::desk();
    let cfg = SynthConfig {
        n_samples: n,
        image_size: spec.input_size,
        class_fractions: vec![0.2; spec.num_attrs],
        seed: 1,
        ..SynthConfig::default()
    };
    ImageSet::from_records(&gen_synthetic(&cfg).expect("valid synthetic config")).expect("nonempty")
}
