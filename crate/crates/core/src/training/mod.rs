pub mod checkpoint;
pub mod dump;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod run;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, EvalReport};
pub use losses::{LossReport, LossWeights};
pub use model::{Model, ModelConfig};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::Trainer;
