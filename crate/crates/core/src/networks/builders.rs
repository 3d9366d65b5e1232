use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, LayerGraph, NodeKind, Projection};
use crate::error::{Error, Result};
use crate::nn::{self, BaseActivation, BatchNormState, ConvLayer, Linear};
use crate::series::SeriesActivationParams;
use crate::tensor::Real;

/// Widest channel count any builder emits.
pub const MAX_WIDTH: usize = 64;

/// Where series activations go in a residual network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// Every activation.
    Full,
    /// Only the activations of stride-2 blocks; the rest keep the base.
    #[serde(alias = "downsampling")]
    DownsamplingOnly,
}

impl std::str::FromStr for Insertion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Insertion::Full),
            "downsampling" | "downsampling_only" => Ok(Insertion::DownsamplingOnly),
            other => Err(Error::InvalidConfig(format!("unknown insertion mode {other:?}"))),
        }
    }
}

/// A series with `terms` terms; zero terms is the plain base activation.
fn series_act<T: Real>(terms: usize, base: BaseActivation) -> NodeKind<T> {
    if terms == 0 {
        return base_act(base);
    }
    NodeKind::Activation(Activation::Series(SeriesActivationParams::init(terms, base)))
}

fn base_act<T: Real>(base: BaseActivation) -> NodeKind<T> {
    NodeKind::Activation(Activation::Base(base))
}

fn head<T: Real, R: Rng + ?Sized>(g: &mut LayerGraph<T>, features: usize, dropout: f64, rng: &mut R) -> Result<()> {
    nn::check_dropout_rate(dropout)?;
    g.push("head.dropout", NodeKind::Dropout { p: dropout });
    g.push("head.fc", NodeKind::Linear(Linear::kaiming(features, g.classes, rng)));
    g.shapes()?;
    Ok(())
}

fn check_input(input: [usize; 3], classes: usize) -> Result<()> {
    if input.contains(&0) || classes < 2 {
        return Err(Error::InvalidConfig(format!("input {input:?} with {classes} classes")));
    }
    Ok(())
}

/// Shallow plain network: a 4×4 stride-4 stem, then `depth − 2` stages of
/// pointwise conv, batch norm, activation and 2×2 max-pool (skipped once the
/// map is 1×1), global average pooling, dropout and a linear classifier.
/// Every activation is a series with `terms` terms.
///
/// With `blended`, each stage starts with an extra pointwise conv and batch
/// norm followed by a blended activation whose ratio the trainer ramps to 1,
/// after which the two pointwise convs can be merged.
#[allow(clippy::too_many_arguments)]
pub fn build_mini_vanillanet<T: Real, R: Rng + ?Sized>(
    input: [usize; 3],
    classes: usize,
    depth: usize,
    width: usize,
    terms: usize,
    base: BaseActivation,
    dropout: f64,
    blended: bool,
    rng: &mut R,
) -> Result<LayerGraph<T>> {
    if !(4..=6).contains(&depth) {
        return Err(Error::InvalidDepth(depth));
    }
    check_input(input, classes)?;
    if width == 0 || width > MAX_WIDTH {
        return Err(Error::InvalidConfig(format!("width {width} outside 1..={MAX_WIDTH}")));
    }
    if input[1] < 4 || input[2] < 4 {
        return Err(Error::InvalidConfig(format!(
            "input {input:?} smaller than the 4x4 stem"
        )));
    }
    let mut g = LayerGraph::new(input, classes);
    g.push(
        "stem.conv",
        NodeKind::Conv(ConvLayer::kaiming(input[0], width, 4, 4, 0, rng)),
    );
    g.push("stem.bn", NodeKind::BatchNorm(BatchNormState::new(width)));
    g.push("stem.act", series_act(terms, base));
    let mut c = width;
    let mut hw = g.shapes_prefix()?;
    for s in 0..depth - 2 {
        let out = (width << (s + 1)).min(MAX_WIDTH);
        if blended {
            g.push(
                format!("stages.{s}.conv_a"),
                NodeKind::Conv(ConvLayer::kaiming(c, c, 1, 1, 0, rng)),
            );
            g.push(format!("stages.{s}.bn_a"), NodeKind::BatchNorm(BatchNormState::new(c)));
            g.push(
                format!("stages.{s}.blend"),
                NodeKind::Activation(Activation::Blend { base, lambda: 0.0 }),
            );
        }
        g.push(
            format!("stages.{s}.conv"),
            NodeKind::Conv(ConvLayer::kaiming(c, out, 1, 1, 0, rng)),
        );
        g.push(format!("stages.{s}.bn"), NodeKind::BatchNorm(BatchNormState::new(out)));
        g.push(format!("stages.{s}.act"), series_act(terms, base));
        if hw.0 >= 2 && hw.1 >= 2 {
            g.push(format!("stages.{s}.pool"), NodeKind::MaxPool { k: 2, stride: 2 });
            hw = (hw.0 / 2, hw.1 / 2);
        }
        c = out;
    }
    g.push("head.pool", NodeKind::GlobalAvgPool);
    head(&mut g, c, dropout, rng)?;
    Ok(g)
}

/// Residual network of basic blocks (two 3×3 conv, batch norm, activation
/// layers around a skip connection). Stage `s` has `width·2^s` channels
/// (capped) and, after the first stage, opens with a stride-2 block whose
/// skip path is a projected 1×1 conv with batch norm.
///
/// In downsampling-only mode the first activation of each stride-2 block is
/// a series and every other activation keeps the base. `mask`, when given,
/// selects which stride-2 blocks get one (one flag per stride-2 block).
#[allow(clippy::too_many_arguments)]
pub fn build_mini_resnet<T: Real, R: Rng + ?Sized>(
    input: [usize; 3],
    classes: usize,
    blocks_per_stage: &[usize],
    width: usize,
    terms: usize,
    base: BaseActivation,
    insertion: Insertion,
    mask: Option<&[bool]>,
    dropout: f64,
    rng: &mut R,
) -> Result<LayerGraph<T>> {
    check_input(input, classes)?;
    if blocks_per_stage.is_empty() || blocks_per_stage.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "blocks per stage {blocks_per_stage:?}: need at least one stage of at least one block"
        )));
    }
    if width == 0 || width > MAX_WIDTH {
        return Err(Error::InvalidConfig(format!("width {width} outside 1..={MAX_WIDTH}")));
    }
    let downsampling_blocks = blocks_per_stage.len() - 1;
    if let Some(m) = mask {
        if m.len() != downsampling_blocks {
            return Err(Error::InvalidConfig(format!(
                "mask has {} flags for {downsampling_blocks} stride-2 blocks",
                m.len()
            )));
        }
    }
    let full = insertion == Insertion::Full;
    let act = |series: bool| {
        if series {
            series_act::<T>(terms, base)
        } else {
            base_act::<T>(base)
        }
    };

    let mut g = LayerGraph::new(input, classes);
    g.push(
        "stem.conv",
        NodeKind::Conv(ConvLayer::kaiming(input[0], width, 3, 1, 1, rng)),
    );
    g.push("stem.bn", NodeKind::BatchNorm(BatchNormState::new(width)));
    g.push("stem.act", act(full));
    let mut c = width;
    let mut down_idx = 0;
    for (s, &blocks) in blocks_per_stage.iter().enumerate() {
        let out = (width << s).min(MAX_WIDTH);
        for b in 0..blocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            // In downsampling-only mode the activation right after the
            // strided conv is the one replaced.
            let series = if stride == 2 {
                let on = full || mask.is_none_or(|m| m[down_idx]);
                down_idx += 1;
                on
            } else {
                full
            };
            let p = format!("stages.{s}.blocks.{b}");
            g.push(format!("{p}.begin"), NodeKind::ResidualBegin);
            g.push(
                format!("{p}.conv1"),
                NodeKind::Conv(ConvLayer::kaiming(c, out, 3, stride, 1, rng)),
            );
            g.push(format!("{p}.bn1"), NodeKind::BatchNorm(BatchNormState::new(out)));
            g.push(format!("{p}.act1"), act(series));
            g.push(
                format!("{p}.conv2"),
                NodeKind::Conv(ConvLayer::kaiming(out, out, 3, 1, 1, rng)),
            );
            g.push(format!("{p}.bn2"), NodeKind::BatchNorm(BatchNormState::new(out)));
            let projection = (stride != 1 || c != out).then(|| Projection {
                conv: ConvLayer::kaiming(c, out, 1, stride, 0, rng),
                bn: Some(BatchNormState::new(out)),
            });
            g.push(format!("{p}.end"), NodeKind::ResidualEnd { projection });
            g.push(format!("{p}.act2"), act(full));
            c = out;
        }
    }
    g.push("head.pool", NodeKind::GlobalAvgPool);
    head(&mut g, c, dropout, rng)?;
    Ok(g)
}

/// Small conventional CNN: per entry of `widths`, a 3×3 same-padded conv,
/// batch norm, activation and 2×2 max-pool; then dropout and a linear
/// classifier over the flattened map.
pub fn build_mini_cnn<T: Real, R: Rng + ?Sized>(
    input: [usize; 3],
    classes: usize,
    widths: &[usize],
    terms: usize,
    base: BaseActivation,
    dropout: f64,
    rng: &mut R,
) -> Result<LayerGraph<T>> {
    check_input(input, classes)?;
    if widths.is_empty() || widths.iter().any(|&w| w == 0 || w > MAX_WIDTH) {
        return Err(Error::InvalidConfig(format!(
            "widths {widths:?} must be in 1..={MAX_WIDTH}"
        )));
    }
    let mut g = LayerGraph::new(input, classes);
    let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
    for (s, &out) in widths.iter().enumerate() {
        if h < 2 || w < 2 {
            return Err(Error::InvalidConfig(format!(
                "{} stages do not fit a {}x{} input",
                widths.len(),
                input[1],
                input[2]
            )));
        }
        g.push(
            format!("stages.{s}.conv"),
            NodeKind::Conv(ConvLayer::kaiming(c, out, 3, 1, 1, rng)),
        );
        g.push(format!("stages.{s}.bn"), NodeKind::BatchNorm(BatchNormState::new(out)));
        g.push(format!("stages.{s}.act"), series_act(terms, base));
        g.push(format!("stages.{s}.pool"), NodeKind::MaxPool { k: 2, stride: 2 });
        c = out;
        h /= 2;
        w /= 2;
    }
    head(&mut g, c * h * w, dropout, rng)?;
    Ok(g)
}

impl<T: Real> LayerGraph<T> {
    /// Spatial extent after the nodes pushed so far.
    fn shapes_prefix(&self) -> Result<(usize, usize)> {
        let [_, mut h, mut w] = self.input_shape;
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Conv(c) => (h, w) = c.out_hw(h, w),
                NodeKind::MaxPool { k, stride } | NodeKind::AvgPool { k, stride } => {
                    h = (h - k) / stride + 1;
                    w = (w - k) / stride + 1;
                }
                _ => {}
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::shape("LayerGraph", "spatial extent collapsed to zero"));
        }
        Ok((h, w))
    }
}
