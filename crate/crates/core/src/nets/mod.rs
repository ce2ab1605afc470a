//! The encoder, attribute-conditioned decoder, latent discriminator and
//! latent gender classifier, plus their file format.

mod arch;
mod io;
mod models;

pub use arch::ArchSpec;
pub use io::{decode_model, encode_model, load_model, read_header, save_model, ModelHeader, HEADER_RECORD};
pub use models::{
    attr_planes, attr_planes_batch, Classifier, Decoder, Discriminator, Encoder, Network, CLF_KERNEL, GENDERS,
    KERNEL, PAD, STRIDE,
};

#[cfg(test)]
mod tests;
