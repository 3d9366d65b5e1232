use super::graph::{LayerGraph, NodeKind};
use crate::error::Result;
use crate::nn::ConvLayer;
use crate::tensor::Real;

/// Parameter and per-sample FLOP count of a graph.
///
/// Conventions: a convolution costs `2·C_in·k²·C_out·H_out·W_out`, a linear
/// layer `2·in·out`; batch norm, activations (of any kind), residual adds
/// and global pooling cost one operation per element of their input
/// (`C·H·W`); a pooling window costs `k²` per output element; dropout is
/// free. Parameters are every trainable tensor, series scalars included;
/// running statistics are not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub params: usize,
    pub flops: u64,
}

fn conv_flops<T: Real>(c: &ConvLayer<T>, out: &[usize]) -> u64 {
    let k = c.kernel() as u64;
    2 * c.c_in() as u64 * k * k * c.c_out() as u64 * out[1] as u64 * out[2] as u64
}

pub fn count_params_flops<T: Real>(g: &LayerGraph<T>) -> Result<Cost> {
    let shapes = g.shapes()?;
    let mut flops = 0u64;
    let mut input: Vec<usize> = g.input_shape.to_vec();
    for (node, out) in g.nodes.iter().zip(&shapes) {
        let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
        flops += match &node.kind {
            NodeKind::Conv(c) => conv_flops(c, out),
            NodeKind::BatchNorm(_) | NodeKind::Activation(_) | NodeKind::GlobalAvgPool => elems(&input),
            NodeKind::MaxPool { k, .. } | NodeKind::AvgPool { k, .. } => elems(out) * (k * k) as u64,
            NodeKind::Linear(l) => 2 * l.inputs() as u64 * l.outputs() as u64,
            NodeKind::Dropout { .. } | NodeKind::ResidualBegin => 0,
            NodeKind::ResidualEnd { projection } => {
                let proj = projection.as_ref().map_or(0, |p| {
                    conv_flops(&p.conv, out) + if p.bn.is_some() { elems(out) } else { 0 }
                });
                proj + elems(out)
            }
        };
        input = out.clone();
    }
    Ok(Cost {
        params: g.param_count(),
        flops,
    })
}
