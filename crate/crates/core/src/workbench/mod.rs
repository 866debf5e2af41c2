//! Configuration, checkpoints, image files, the synthetic dataset and the
//! training and inference drivers.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod restore;
pub mod train;

pub use config::{Schedule, StageConfig};
pub use dataset::{gen_data, load_dataset, FaceSpec};
pub use train::{train_autoencoder, train_dict, train_restorer, DictRun, LossLog, RestoreRun};
