//! Small CPU neural-network stack: LR, MLP and CNN classifiers over 256
//! classes, trained with Ranger and early stopping.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use model::{make_model, Mode, Model, ModelKind, ModelSpec, NUM_CLASSES};
pub use optim::{Ranger, RangerConfig};
pub use tensor::{Param, Scalar, Tensor};
pub use train::{train, EarlyStopping, History, Progress, Samples, TrainConfig};
