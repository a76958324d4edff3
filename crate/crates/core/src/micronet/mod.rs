//! Small dense-block convolutional network trained from scratch on observation maps.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod weights;

pub use adam::{AdamConfig, AdamState};
pub use layers::Mode;
pub use loss::mse_loss;
pub use network::{Architecture, ForwardCache, LayerSpec, Network, FORMAT_VERSION};
pub use tensor::{Real, Tensor};
pub use weights::{load_weights, manifest_path, save_weights};
