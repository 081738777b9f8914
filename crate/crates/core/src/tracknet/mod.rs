//! POINT: the Siamese point-tracking network and its differentiable pieces.

pub mod loss;
pub mod network;
pub mod ops;
pub mod poi;
pub mod tape;
pub mod track;

pub use loss::{point2_loss, point2_loss_tape, LossNodes, LossValue};
pub use network::{extract_features, NetworkConfig, NetworkParams, NormMode};
pub use ops::Tensor;
pub use poi::{
    fe_layer, heatmap_to_poi, heatmap_to_poi_grad, poi_convolution, FeatureKernel, FeatureMap,
    DEFAULT_WINDOW_PX,
};
pub use tape::{Gradients, NodeId, Tape};
pub use track::{track_view, track_view_nodes, track_view_tape, TrackedPoi, ViewGraph};
