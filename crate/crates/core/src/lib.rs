pub mod acf;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod training;

pub use acf::{AcfModule, AcfVariant, AttentionalFeature, ClassCenters, CoarseProbs};
pub use autodiff::{BnMode, Graph, RunningStats, Var};
pub use data::{DatasetManifest, LabelMap, Sample};
pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, EvalConfig, EvalReport};
pub use network::{ForwardOutputs, Model, NetworkConfig};
pub use tensor::Tensor;
pub use training::{TrainConfig, Trainer};
