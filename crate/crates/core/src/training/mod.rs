pub mod adam;
pub mod loss;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{attention_loss, combined_loss, density_loss, PixelReduction};
pub use trainer::{train, TrainConfig, TrainReport, TrainState, Trainer};
