mod arch;
mod model;
mod train;

pub use arch::{architecture_spec, param_count, Activation, Architecture, LayerInput, LayerSpec, INPUT};
pub use model::{BoundParams, DepthModel, DepthRange, DOWNSAMPLE_STAGES};
pub use train::{train, train_with_history, Adam, TrainConfig};
pub(crate) use train::relative_l1;
