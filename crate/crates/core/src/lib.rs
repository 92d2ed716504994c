//! Text-to-image adversarial model built around a frozen contrastive
//! image/text encoder: generator, discriminator, objective, training loop,
//! data pipeline and metrics.

pub mod backbone;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod layers;
pub mod objectives;
pub mod tensor_file;
pub mod trainer;

pub use backbone::{Backbone, BackboneConfig, FeaturePyramid, PromptStack, TokenIds, WeightsSource};
pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use error::{Error, Result};
pub use objectives::ObjectiveConfig;
pub use generator::{Generator, GeneratorConfig};
pub use trainer::{StepMetrics, TrainConfig, Trainer};
