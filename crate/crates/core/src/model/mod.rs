//! Generator, patch attention and discriminator.

mod attention;
mod config;
mod discriminator;
mod generator;
mod params;

pub use attention::{attention_forward, attention_scores};
pub use config::{AttentionConfig, DiscriminatorConfig, GeneratorConfig, Toggles};
pub use discriminator::{build_discriminator, discriminator_forward};
pub use generator::{
    build_generator, generate, generator_forward, structure_embedding_forward, GeneratorInput, GeneratorOutput, GeneratorVars, INPUT_CHANNELS,
};
pub use params::{ModelParams, ParamScope};
pub(crate) use params::he_normal;
