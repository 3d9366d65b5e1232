//! Deploy-time reparameterisation: conv + batch-norm fusion, merging of
//! adjacent 1×1 convolutions, and folding a shared series amplitude into
//! the preceding convolution.

use std::fmt;

use crate::error::{Error, Result};
use crate::networks::{Activation, LayerGraph, Node, NodeKind, Projection};
use crate::nn::{BatchNormState, ConvLayer, Mode, Param};
use crate::series::SeriesActivationParams;
use crate::tensor::{Real, Tensor};

/// Convolution weights produced by a fusion step.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
    /// Names of the layers folded into this one.
    pub provenance: Vec<String>,
}

impl<T: Real> FusedConv<T> {
    pub fn from_conv(conv: &ConvLayer<T>, name: impl Into<String>) -> Self {
        FusedConv {
            weight: conv.weight.value.clone(),
            bias: conv.bias.value.clone(),
            stride: conv.stride,
            pad: conv.pad,
            provenance: vec![name.into()],
        }
    }

    pub fn into_conv(self) -> ConvLayer<T> {
        ConvLayer {
            weight: Param::new(self.weight),
            bias: Param::new(self.bias),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }
}

/// Why a series layer kept its amplitude instead of folding it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NotFoldableReason {
    NonHomogeneousBase(String),
    NonZeroShift,
    UnequalAmplitudes,
    NonPositiveAmplitude,
    NoPrecedingConv,
}

impl fmt::Display for NotFoldableReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NotFoldableReason::NonHomogeneousBase(b) => write!(f, "base activation {b} is not positively homogeneous"),
            NotFoldableReason::NonZeroShift => write!(f, "series shifts are not all zero"),
            NotFoldableReason::UnequalAmplitudes => write!(f, "amplitudes differ between terms"),
            NotFoldableReason::NonPositiveAmplitude => write!(f, "shared amplitude is not positive"),
            NotFoldableReason::NoPrecedingConv => write!(f, "not directly preceded by a convolution"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotFoldable {
    pub layer: String,
    pub reason: NotFoldableReason,
}

/// Result of [`fold_theta`].
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum FoldOutcome<T> {
    Folded(FusedConv<T>, SeriesActivationParams<T>),
    NotFoldable(NotFoldableReason),
}

/// `W′ᵢ = γᵢ/√(σ²ᵢ+ε)·Wᵢ`, `B′ᵢ = (Bᵢ − μᵢ)·γᵢ/√(σ²ᵢ+ε) + βᵢ` per output channel.
pub fn fuse_conv_bn<T: Real>(conv: &FusedConv<T>, bn: &BatchNormState<T>) -> Result<FusedConv<T>> {
    let c_out = conv.weight.shape()[0];
    if bn.channels() != c_out {
        return Err(Error::ChannelMismatch(format!(
            "conv has {c_out} output channels, batch norm has {}",
            bn.channels()
        )));
    }
    if bn.tracked == 0 {
        return Err(Error::UnpopulatedStats);
    }
    let eps = T::c(bn.eps);
    let per_out = conv.weight.numel() / c_out;
    let mut weight = conv.weight.clone();
    let mut bias = conv.bias.clone();
    for i in 0..c_out {
        let scale = bn.gamma.value.data()[i] / (bn.running_var.data()[i] + eps).sqrt();
        for w in &mut weight.data_mut()[i * per_out..(i + 1) * per_out] {
            *w = *w * scale;
        }
        let b = &mut bias.data_mut()[i];
        *b = (*b - bn.running_mean.data()[i]) * scale + bn.beta.value.data()[i];
    }
    let mut provenance = conv.provenance.clone();
    provenance.push("bn".into());
    Ok(FusedConv {
        weight,
        bias,
        stride: conv.stride,
        pad: conv.pad,
        provenance,
    })
}

fn check_pointwise<T: Real>(c: &FusedConv<T>, which: &str) -> Result<()> {
    let s = c.weight.shape();
    if s[2] != 1 || s[3] != 1 || c.stride != 1 || c.pad != 0 {
        return Err(Error::GeometryUnsupported(format!(
            "{which}: kernel {}x{}, stride {}, pad {}",
            s[2], s[3], c.stride, c.pad
        )));
    }
    Ok(())
}

/// Composes two pointwise convolutions: `W = W₂·W₁`, `B = W₂·B₁ + B₂`.
pub fn merge_1x1_convs<T: Real>(c1: &FusedConv<T>, c2: &FusedConv<T>) -> Result<FusedConv<T>> {
    check_pointwise(c1, "first conv")?;
    check_pointwise(c2, "second conv")?;
    let (mid, c_in) = (c1.weight.shape()[0], c1.weight.shape()[1]);
    let (c_out, mid2) = (c2.weight.shape()[0], c2.weight.shape()[1]);
    if mid != mid2 {
        return Err(Error::ChannelMismatch(format!(
            "first conv emits {mid} channels, second expects {mid2}"
        )));
    }
    let mut w = vec![T::zero(); c_out * c_in];
    T::gemm(
        c_out,
        mid,
        c_in,
        c2.weight.data(),
        false,
        c1.weight.data(),
        false,
        T::zero(),
        &mut w,
    );
    let w2 = c2.weight.data();
    let b1 = c1.bias.data();
    let bias: Vec<T> = (0..c_out)
        .map(|o| {
            let dot: T = (0..mid).map(|m| w2[o * mid + m] * b1[m]).sum();
            dot + c2.bias.data()[o]
        })
        .collect();
    let mut provenance = c1.provenance.clone();
    provenance.extend(c2.provenance.iter().cloned());
    Ok(FusedConv {
        weight: Tensor::new([c_out, c_in, 1, 1], w)?,
        bias: Tensor::new([c_out], bias)?,
        stride: 1,
        pad: 0,
        provenance,
    })
}

/// Moves a shared positive amplitude θ from the series into the preceding
/// convolution. Exact only for a positively homogeneous base with all
/// shifts zero, where `θ·f(Wx + B) = f(θWx + θB)`.
pub fn fold_theta<T: Real>(fc: &FusedConv<T>, p: &SeriesActivationParams<T>) -> FoldOutcome<T> {
    if !p.base.is_positively_homogeneous() {
        return FoldOutcome::NotFoldable(NotFoldableReason::NonHomogeneousBase(p.base.to_string()));
    }
    if p.shift.value.data().iter().any(|&b| b != T::zero()) {
        return FoldOutcome::NotFoldable(NotFoldableReason::NonZeroShift);
    }
    let thetas = p.theta.value.data();
    let Some(&theta) = thetas.first() else {
        return FoldOutcome::Folded(fc.clone(), p.clone());
    };
    if thetas.iter().any(|&t| t != theta) {
        return FoldOutcome::NotFoldable(NotFoldableReason::UnequalAmplitudes);
    }
    if theta <= T::zero() {
        return FoldOutcome::NotFoldable(NotFoldableReason::NonPositiveAmplitude);
    }
    if theta == T::one() {
        return FoldOutcome::Folded(fc.clone(), p.clone());
    }
    let mut folded = fc.clone();
    folded.weight = fc.weight.map(|w| w * theta);
    folded.bias = fc.bias.map(|b| b * theta);
    folded.provenance.push("theta".into());
    let mut params = p.clone();
    params.theta.value = Tensor::ones([thetas.len()]);
    FoldOutcome::Folded(folded, params)
}

/// A fused graph together with the series layers that could not be folded.
#[derive(Clone, Debug)]
pub struct FusionOutcome<T> {
    pub graph: LayerGraph<T>,
    pub not_foldable: Vec<NotFoldable>,
}

fn is_identity_blend<T>(node: &Node<T>) -> bool {
    matches!(node.kind, NodeKind::Activation(Activation::Blend { lambda, .. }) if lambda == 1.0)
}

fn is_pointwise<T: Real>(conv: &ConvLayer<T>) -> bool {
    conv.kernel() == 1 && conv.stride == 1 && conv.pad == 0
}

/// Conv + batch-norm fusion on every adjacent pair (including residual
/// projections), then 1×1 merging across identity blends, then amplitude
/// folding into convolutions that directly feed a series activation.
pub fn fuse_network<T: Real>(g: &LayerGraph<T>) -> Result<FusionOutcome<T>> {
    if g.mode != Mode::Eval {
        return Err(Error::InvalidConfig("fusion requires an eval-mode graph".into()));
    }
    let mut nodes: Vec<Node<T>> = Vec::with_capacity(g.nodes.len());
    let mut i = 0;
    while i < g.nodes.len() {
        let node = &g.nodes[i];
        match (&node.kind, g.nodes.get(i + 1).map(|n| &n.kind)) {
            (NodeKind::Conv(conv), Some(NodeKind::BatchNorm(bn))) => {
                let fused = fuse_conv_bn(&FusedConv::from_conv(conv, node.name.clone()), bn)?;
                nodes.push(Node {
                    name: node.name.clone(),
                    kind: NodeKind::Conv(fused.into_conv()),
                });
                i += 2;
            }
            (
                NodeKind::ResidualEnd {
                    projection: Some(Projection { conv, bn: Some(bn) }),
                },
                _,
            ) => {
                let fused = fuse_conv_bn(&FusedConv::from_conv(conv, node.name.clone()), bn)?;
                nodes.push(Node {
                    name: node.name.clone(),
                    kind: NodeKind::ResidualEnd {
                        projection: Some(Projection {
                            conv: fused.into_conv(),
                            bn: None,
                        }),
                    },
                });
                i += 1;
            }
            _ => {
                nodes.push(node.clone());
                i += 1;
            }
        }
    }

    let mut merged: Vec<Node<T>> = Vec::with_capacity(nodes.len());
    let mut i = 0;
    while i < nodes.len() {
        let mergeable = match (merged.last().map(|n| &n.kind), nodes.get(i + 1).map(|n| &n.kind)) {
            (Some(NodeKind::Conv(c1)), Some(NodeKind::Conv(c2))) => {
                is_identity_blend(&nodes[i]) && is_pointwise(c1) && is_pointwise(c2)
            }
            _ => false,
        };
        if mergeable {
            let prev = merged.pop().expect("checked above");
            let (NodeKind::Conv(c1), NodeKind::Conv(c2)) = (&prev.kind, &nodes[i + 1].kind) else {
                unreachable!("checked above");
            };
            let m = merge_1x1_convs(
                &FusedConv::from_conv(c1, prev.name.clone()),
                &FusedConv::from_conv(c2, nodes[i + 1].name.clone()),
            )?;
            merged.push(Node {
                name: nodes[i + 1].name.clone(),
                kind: NodeKind::Conv(m.into_conv()),
            });
            i += 2;
            continue;
        }
        merged.push(nodes[i].clone());
        i += 1;
    }

    let mut not_foldable = Vec::new();
    for i in 0..merged.len() {
        let NodeKind::Activation(Activation::Series(p)) = &merged[i].kind else {
            continue;
        };
        if p.terms() == 0 || p.theta.value.data().iter().all(|&t| t == T::one()) {
            continue;
        }
        let name = merged[i].name.clone();
        let conv = match i.checked_sub(1).map(|j| &merged[j].kind) {
            Some(NodeKind::Conv(c)) => c,
            _ => {
                not_foldable.push(NotFoldable {
                    layer: name,
                    reason: NotFoldableReason::NoPrecedingConv,
                });
                continue;
            }
        };
        match fold_theta(&FusedConv::from_conv(conv, merged[i - 1].name.clone()), p) {
            FoldOutcome::Folded(fc, params) => {
                merged[i - 1].kind = NodeKind::Conv(fc.into_conv());
                merged[i].kind = NodeKind::Activation(Activation::Series(params));
            }
            FoldOutcome::NotFoldable(reason) => not_foldable.push(NotFoldable { layer: name, reason }),
        }
    }

    let graph = LayerGraph {
        nodes: merged,
        mode: Mode::Eval,
        input_shape: g.input_shape,
        classes: g.classes,
    };
    graph.shapes()?;
    Ok(FusionOutcome { graph, not_foldable })
}

/// One row of the equivalence report.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiff {
    pub layer: String,
    pub max_abs_diff: f64,
}

/// Equivalence of a fused graph against its source on a probe batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// Activation outputs present in both graphs, then a final `logits` row.
    pub layers: Vec<LayerDiff>,
    pub max_abs_diff: f64,
    pub argmax_agree: usize,
    pub probes: usize,
}

impl EquivalenceReport {
    pub fn argmax_identical(&self) -> bool {
        self.argmax_agree == self.probes
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,max_abs_diff\n");
        for row in &self.layers {
            s.push_str(&format!("{},{}\n", row.layer, row.max_abs_diff));
        }
        s
    }
}

/// Runs both graphs (eval mode) on `probes` and compares activation outputs
/// matched by layer name plus the final class scores.
pub fn equivalence_report<T: Real>(
    original: &LayerGraph<T>,
    fused: &LayerGraph<T>,
    probes: &Tensor<T>,
) -> Result<EquivalenceReport> {
    type Outputs<T> = (Vec<(String, Tensor<T>)>, Tensor<T>);
    let run = |g: &LayerGraph<T>| -> Result<Outputs<T>> {
        let mut g = g.clone();
        g.set_mode(Mode::Eval);
        let tape = crate::tensor::Tape::new();
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Dropout);
        let pass = g.forward(&tape, tape.constant(probes.clone()), &mut rng, true)?;
        let caps = pass
            .captures
            .iter()
            .map(|(idx, v)| (g.nodes[*idx].name.clone(), (*v.value()).clone()))
            .collect();
        let out = (*pass.output.value()).clone();
        Ok((caps, out))
    };
    let (caps_a, out_a) = run(original)?;
    let (caps_b, out_b) = run(fused)?;
    let mut layers = Vec::new();
    for (name, a) in &caps_a {
        if let Some((_, b)) = caps_b.iter().find(|(n, _)| n == name) {
            layers.push(LayerDiff {
                layer: name.clone(),
                max_abs_diff: a.max_abs_diff(b)?.f64(),
            });
        }
    }
    let logits_diff = out_a.max_abs_diff(&out_b)?.f64();
    layers.push(LayerDiff {
        layer: "logits".into(),
        max_abs_diff: logits_diff,
    });
    let max_abs_diff = layers.iter().map(|l| l.max_abs_diff).fold(0.0, f64::max);
    let pa = out_a.argmax_rows()?;
    let pb = out_b.argmax_rows()?;
    let argmax_agree = pa.iter().zip(&pb).filter(|(a, b)| a == b).count();
    Ok(EquivalenceReport {
        layers,
        max_abs_diff,
        argmax_agree,
        probes: pa.len(),
    })
}
