//! Layer graphs and the desk-scale architectures built from them.

mod builders;
mod cost;
mod gradcheck;
mod graph;

pub use builders::{build_mini_cnn, build_mini_resnet, build_mini_vanillanet, Insertion, MAX_WIDTH};
pub use cost::{count_params_flops, Cost};
pub use gradcheck::{gradcheck_graph, GradcheckOptions, GradcheckReport, GroupCheck, TensorCheck};
pub use graph::{
    Activation, BnSlot, BufferRef, ForwardPass, LayerGraph, Node, NodeKind, ParamMut, ParamRef, ParamRole, Projection,
};
