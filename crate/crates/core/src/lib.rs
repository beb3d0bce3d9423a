//! Joint page stream segmentation, interpage dependency parsing and page
//! classification over multimodal page embeddings.

pub mod autodiff;
pub mod document;
pub mod embed;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod parser;
pub mod synth;
pub mod tensor;
pub mod train;

pub use document::{AnnotatedDocument, Arc, ArcLabel, Page, PageDependencyTree, SegTag};
pub use embed::Fusion;
pub use error::{Error, Result};
pub use model::{LossWeights, Model, ModelConfig};
pub use parallel::Execution;
pub use train::TrainConfig;
pub use eval::EvalReport;
pub use synth::GeneratorConfig;
