//! Coordinate networks and the differentiation engine behind them.

pub mod checkpoint;
pub mod encoding;
pub mod mat;
pub mod network;
pub mod params;
pub mod tape;

pub use encoding::PositionalEncoding;
pub use mat::Mat;
pub use network::{
    spatial_gradient, Activation, AnalyticSphere, EmptyScene, FgEval, FieldSet, ForegroundField,
    LinearProbe, MlpSpec, NetworkSpec, SceneEval, SceneField, SceneLayer,
};
pub use params::{Gradients, ParamGroup, ParamStore, ParamVars};
pub use tape::{ParamGrad, Tape, Var};
