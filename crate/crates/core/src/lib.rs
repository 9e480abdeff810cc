//! Prompt-to-simulate tuning over a frozen dual encoder, with the
//! universal cross-domain retrieval protocol and its metrics.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command line live in the `pros` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod caps;
pub mod error;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod protocol;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod training;

pub use backbone::{Backbone, BackboneConfig, JointFeature, PatchEmbeddings, PromptedSequence};
pub use caps::{Caps, CapsConfig};
pub use error::{ProsError, Result};
pub use model::{Ablations, Checkpoint, FeatureMode, ModelSpec, ProsModel};
pub use prompts::{build_mask, CaDPPair, MaskMode, MaskSpec, PromptTemplates, PromptUnitBank};
pub use protocol::{build_split, ClassPartition, DatasetManifest, GalleryMode, ManifestItem, Protocol, ProtocolSplit, SplitArgs};
pub use retrieval::{map_all, map_at_k, prec_at_k, rank, sigma_diagnostic, EmbeddingGallery, EvalImage, RankedResult};
pub use synth::{generate_synthetic_dataset, SynthConfig, SyntheticGenerator};
pub use tensor::Matrix;
pub use training::{align_loss, build_caption_bank, Stage, TrainConfig};
