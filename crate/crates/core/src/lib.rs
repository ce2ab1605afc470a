//! Adversarially trained attribute-invariant autoencoders (encoder, attribute
//! conditioned decoder, latent discriminator), the gender classifiers trained
//! on their latents, and the stratified evaluation used to measure how evenly
//! a classifier performs across attribute groups.

pub mod data;
pub mod error;
pub mod fairness;
pub mod gradcheck;
pub mod nets;
pub mod seeding;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nets::{ArchSpec, Classifier, Decoder, Discriminator, Encoder, Network};
pub use tensor::{Graph, Mode, Tensor, Var};
