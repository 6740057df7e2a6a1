//! Learned components: per-type operator cost predictors, the graph
//! attention calibrator, the tree convolution summarizer, feature
//! encoding, and the persisted model bundle.

pub mod bundle;
pub mod encoder;
pub mod gat;
pub mod mlp;
pub mod ocp;
pub mod predict;
pub mod tcn;

pub use bundle::{AblationFlags, LabelStats, MapperParams, ModelBundle, PredictorParams};
pub use encoder::{encode_operator, CostStats, FeatureEncoder};
pub use gat::{gat_forward, GatParams, GatTensors};
pub use mlp::{MatrixData, MlpParams, MlpTensors};
pub use ocp::{ocp_predict, ocp_predict_normalized, OcpParams};
pub use predict::{build_query_inputs, predict_query, qpp_forward, PredictorTensors, QueryInputs};
pub use tcn::{tcn_coefficients, tcn_forward, TcnParams, TcnTensors};

use serde::{Deserialize, Serialize};

/// Width/depth configuration of the learned stack. Layer counts are fixed
/// (3 hidden MLP layers, 2 attention layers, 3 convolution layers); widths
/// and head count are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Shared hidden width of mappers, attention layers, and convolution.
    pub hidden: usize,
    /// Attention heads per layer; must divide `hidden`.
    pub gat_heads: usize,
    /// Vertex feature width (set when the encoder is fitted).
    pub vertex_width: usize,
    /// Width of the cost-vector input to the cost mapper (10, or the
    /// vertex feature width when the cost predictors are ablated).
    pub cost_width: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { hidden: 32, gat_heads: 1, vertex_width: 0, cost_width: 10 }
    }
}
