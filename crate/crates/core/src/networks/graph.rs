use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{self, BaseActivation, BatchNormState, BatchStats, ConvLayer, Linear, Mode, Param};
use crate::series::{self, SeriesActivationParams, SeriesParamKind};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Nonlinearity carried by an activation node.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Activation<T> {
    Base(BaseActivation),
    Series(SeriesActivationParams<T>),
    /// `(1 − λ)·f(x) + λ·x`
    Blend {
        base: BaseActivation,
        lambda: f64,
    },
}

impl<T: Real> Activation<T> {
    pub fn series(&self) -> Option<&SeriesActivationParams<T>> {
        match self {
            Activation::Series(p) => Some(p),
            _ => None,
        }
    }

    /// A series activation with `N ≥ 1` terms.
    pub fn is_learnable_series(&self) -> bool {
        matches!(self, Activation::Series(p) if p.terms() > 0)
    }
}

/// Shortcut branch of a residual block that changes shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T> {
    pub conv: ConvLayer<T>,
    pub bn: Option<BatchNormState<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind<T> {
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormState<T>),
    Activation(Activation<T>),
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear(Linear<T>),
    Dropout {
        p: f64,
    },
    /// Saves the current activation as the skip input.
    ResidualBegin,
    /// Adds the (optionally projected) skip input saved by the matching
    /// [`NodeKind::ResidualBegin`].
    ResidualEnd {
        projection: Option<Projection<T>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub kind: NodeKind<T>,
}

/// What a parameter tensor is, independent of which layer holds it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
    Series(SeriesParamKind),
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::ConvWeight => "conv.weight",
            ParamRole::ConvBias => "conv.bias",
            ParamRole::BnGamma => "bn.gamma",
            ParamRole::BnBeta => "bn.beta",
            ParamRole::LinearWeight => "linear.weight",
            ParamRole::LinearBias => "linear.bias",
            ParamRole::Series(k) => k.as_str(),
        }
    }
}

/// Borrowed view of one parameter tensor.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub role: ParamRole,
    pub param: &'a Param<T>,
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub role: ParamRole,
    pub param: &'a mut Param<T>,
}

/// Non-trainable state saved alongside parameters.
pub struct BufferRef<'a, T> {
    pub name: String,
    pub tensor: &'a Tensor<T>,
}

/// Where a batch-norm layer sits, so batch statistics can be folded back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnSlot {
    Node(usize),
    Projection(usize),
}

/// Everything a forward pass produced on the tape.
pub struct ForwardPass<'t, T: Real> {
    pub output: Var<'t, T>,
    /// One var per parameter, in [`LayerGraph::params`] order.
    pub param_vars: Vec<Var<'t, T>>,
    pub batch_stats: Vec<(BnSlot, BatchStats<T>)>,
    /// Outputs of activation nodes, when capture was requested.
    pub captures: Vec<(usize, Var<'t, T>)>,
}

/// Ordered network description consumed by the trainer and fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph<T> {
    pub nodes: Vec<Node<T>>,
    pub mode: Mode,
    /// Per-sample input extents `C, H, W`.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

fn series_param_name(node: &str, kind: SeriesParamKind) -> String {
    format!("{node}.{}", kind.as_str())
}

fn visit_node_params<'a, T: Real, F>(node: &'a Node<T>, f: &mut F)
where
    F: FnMut(String, ParamRole, &'a Param<T>),
{
    let n = &node.name;
    match &node.kind {
        NodeKind::Conv(c) => {
            f(format!("{n}.weight"), ParamRole::ConvWeight, &c.weight);
            f(format!("{n}.bias"), ParamRole::ConvBias, &c.bias);
        }
        NodeKind::BatchNorm(b) => {
            f(format!("{n}.gamma"), ParamRole::BnGamma, &b.gamma);
            f(format!("{n}.beta"), ParamRole::BnBeta, &b.beta);
        }
        NodeKind::Activation(Activation::Series(p)) => {
            for k in SeriesParamKind::ALL {
                f(series_param_name(n, k), ParamRole::Series(k), p.get(k));
            }
        }
        NodeKind::Linear(l) => {
            f(format!("{n}.weight"), ParamRole::LinearWeight, &l.weight);
            f(format!("{n}.bias"), ParamRole::LinearBias, &l.bias);
        }
        NodeKind::ResidualEnd { projection: Some(p) } => {
            f(format!("{n}.proj.weight"), ParamRole::ConvWeight, &p.conv.weight);
            f(format!("{n}.proj.bias"), ParamRole::ConvBias, &p.conv.bias);
            if let Some(bn) = &p.bn {
                f(format!("{n}.proj_bn.gamma"), ParamRole::BnGamma, &bn.gamma);
                f(format!("{n}.proj_bn.beta"), ParamRole::BnBeta, &bn.beta);
            }
        }
        _ => {}
    }
}

fn visit_node_params_mut<'a, T: Real, F>(node: &'a mut Node<T>, f: &mut F)
where
    F: FnMut(String, ParamRole, &'a mut Param<T>),
{
    let n = node.name.clone();
    match &mut node.kind {
        NodeKind::Conv(c) => {
            f(format!("{n}.weight"), ParamRole::ConvWeight, &mut c.weight);
            f(format!("{n}.bias"), ParamRole::ConvBias, &mut c.bias);
        }
        NodeKind::BatchNorm(b) => {
            f(format!("{n}.gamma"), ParamRole::BnGamma, &mut b.gamma);
            f(format!("{n}.beta"), ParamRole::BnBeta, &mut b.beta);
        }
        NodeKind::Activation(Activation::Series(p)) => {
            let SeriesActivationParams {
                theta,
                omega,
                alpha,
                shift,
                ..
            } = p;
            f(
                series_param_name(&n, SeriesParamKind::Theta),
                ParamRole::Series(SeriesParamKind::Theta),
                theta,
            );
            f(
                series_param_name(&n, SeriesParamKind::Omega),
                ParamRole::Series(SeriesParamKind::Omega),
                omega,
            );
            f(
                series_param_name(&n, SeriesParamKind::Alpha),
                ParamRole::Series(SeriesParamKind::Alpha),
                alpha,
            );
            f(
                series_param_name(&n, SeriesParamKind::Shift),
                ParamRole::Series(SeriesParamKind::Shift),
                shift,
            );
        }
        NodeKind::Linear(l) => {
            f(format!("{n}.weight"), ParamRole::LinearWeight, &mut l.weight);
            f(format!("{n}.bias"), ParamRole::LinearBias, &mut l.bias);
        }
        NodeKind::ResidualEnd { projection: Some(p) } => {
            f(format!("{n}.proj.weight"), ParamRole::ConvWeight, &mut p.conv.weight);
            f(format!("{n}.proj.bias"), ParamRole::ConvBias, &mut p.conv.bias);
            if let Some(bn) = &mut p.bn {
                f(format!("{n}.proj_bn.gamma"), ParamRole::BnGamma, &mut bn.gamma);
                f(format!("{n}.proj_bn.beta"), ParamRole::BnBeta, &mut bn.beta);
            }
        }
        _ => {}
    }
}

impl<T: Real> LayerGraph<T> {
    pub fn new(input_shape: [usize; 3], classes: usize) -> Self {
        LayerGraph {
            nodes: Vec::new(),
            mode: Mode::Train,
            input_shape,
            classes,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: NodeKind<T>) {
        self.nodes.push(Node {
            name: name.into(),
            kind,
        });
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            visit_node_params(node, &mut |name, role, param| out.push(ParamRef { name, role, param }));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            visit_node_params_mut(node, &mut |name, role, param| out.push(ParamMut { name, role, param }));
        }
        out
    }

    /// Running statistics of every batch-norm layer.
    pub fn buffers(&self) -> Vec<BufferRef<'_, T>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let bn_with_prefix = match &node.kind {
                NodeKind::BatchNorm(bn) => Some((node.name.clone(), bn)),
                NodeKind::ResidualEnd {
                    projection: Some(Projection { bn: Some(bn), .. }),
                } => Some((format!("{}.proj_bn", node.name), bn)),
                _ => None,
            };
            if let Some((prefix, bn)) = bn_with_prefix {
                out.push(BufferRef {
                    name: format!("{prefix}.running_mean"),
                    tensor: &bn.running_mean,
                });
                out.push(BufferRef {
                    name: format!("{prefix}.running_var"),
                    tensor: &bn.running_var,
                });
            }
        }
        out
    }

    /// Every batch-norm layer with its checkpoint name prefix.
    pub fn batch_norms_mut(&mut self) -> Vec<(String, &mut BatchNormState<T>)> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match &mut node.kind {
                NodeKind::BatchNorm(bn) => out.push((node.name.clone(), bn)),
                NodeKind::ResidualEnd {
                    projection: Some(Projection { bn: Some(bn), .. }),
                } => out.push((format!("{}.proj_bn", node.name), bn)),
                _ => {}
            }
        }
        out
    }

    pub fn batch_norms(&self) -> Vec<(String, &BatchNormState<T>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::BatchNorm(bn) => out.push((node.name.clone(), bn)),
                NodeKind::ResidualEnd {
                    projection: Some(Projection { bn: Some(bn), .. }),
                } => out.push((format!("{}.proj_bn", node.name), bn)),
                _ => {}
            }
        }
        out
    }

    /// Indices of activation nodes whose nonlinearity is a series with
    /// at least one term.
    pub fn series_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(&n.kind, NodeKind::Activation(a) if a.is_learnable_series()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn activation_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Activation(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.param.value.numel()).sum()
    }

    pub fn set_blend_lambda(&mut self, lambda: f64) {
        for node in &mut self.nodes {
            if let NodeKind::Activation(Activation::Blend { lambda: l, .. }) = &mut node.kind {
                *l = lambda;
            }
        }
    }

    /// Per-sample output extents of every node, checking that shapes chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [c, h, w] = self.input_shape;
        let mut cur = vec![c, h, w];
        let mut stack: Vec<Vec<usize>> = Vec::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let name = node.name.as_str();
            let bad = |detail: String| Error::shape("LayerGraph", format!("{name}: {detail}"));
            cur = match &node.kind {
                NodeKind::Conv(conv) => conv_out(conv, &cur).map_err(|e| bad(e.to_string()))?,
                NodeKind::BatchNorm(bn) => {
                    if cur.len() < 2 && cur.len() != 1 || cur[0] != bn.channels() {
                        return Err(bad(format!(
                            "{} channels into batch norm over {}",
                            cur[0],
                            bn.channels()
                        )));
                    }
                    cur
                }
                NodeKind::Activation(_) | NodeKind::Dropout { .. } => cur,
                NodeKind::MaxPool { k, stride } | NodeKind::AvgPool { k, stride } => {
                    if cur.len() != 3 || cur[1] < *k || cur[2] < *k {
                        return Err(bad(format!("pool window {k} on {cur:?}")));
                    }
                    vec![cur[0], (cur[1] - k) / stride + 1, (cur[2] - k) / stride + 1]
                }
                NodeKind::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return Err(bad(format!("global pool on {cur:?}")));
                    }
                    vec![cur[0]]
                }
                NodeKind::Linear(l) => {
                    let features: usize = cur.iter().product();
                    if features != l.inputs() {
                        return Err(bad(format!("{features} features into linear expecting {}", l.inputs())));
                    }
                    vec![l.outputs()]
                }
                NodeKind::ResidualBegin => {
                    stack.push(cur.clone());
                    cur
                }
                NodeKind::ResidualEnd { projection } => {
                    let skip = stack.pop().ok_or_else(|| bad("unbalanced residual end".into()))?;
                    let skip = match projection {
                        Some(p) => conv_out(&p.conv, &skip).map_err(|e| bad(e.to_string()))?,
                        None => skip,
                    };
                    if skip != cur {
                        return Err(bad(format!("skip {skip:?} vs main {cur:?}")));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        if !stack.is_empty() {
            return Err(Error::shape("LayerGraph", "unbalanced residual begin"));
        }
        if cur != [self.classes] {
            return Err(Error::shape(
                "LayerGraph",
                format!("output {cur:?}, expected [{}]", self.classes),
            ));
        }
        Ok(out)
    }

    /// Runs the graph on `x` (`N, C, H, W`), binding every parameter as a
    /// gradient-carrying leaf. Batch statistics from train-mode batch norm
    /// are returned rather than applied; see [`LayerGraph::apply_batch_stats`].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: Var<'t, T>,
        rng: &mut dyn RngCore,
        capture: bool,
    ) -> Result<ForwardPass<'t, T>> {
        let mode = self.mode;
        let mut param_vars = Vec::new();
        let mut batch_stats = Vec::new();
        let mut captures = Vec::new();
        let mut stack: Vec<Var<'t, T>> = Vec::new();
        let mut cur = x;
        let bind = |p: &Param<T>, vars: &mut Vec<Var<'t, T>>| {
            let v = tape.param(p.value.clone());
            vars.push(v);
            v
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            cur = match &node.kind {
                NodeKind::Conv(c) => {
                    let w = bind(&c.weight, &mut param_vars);
                    let b = bind(&c.bias, &mut param_vars);
                    nn::conv2d(cur, w, b, c.stride, c.pad)?
                }
                NodeKind::BatchNorm(bn) => {
                    let g = bind(&bn.gamma, &mut param_vars);
                    let b = bind(&bn.beta, &mut param_vars);
                    let (y, stats) = nn::batch_norm(cur, g, b, bn, mode)?;
                    if let Some(s) = stats {
                        batch_stats.push((BnSlot::Node(idx), s));
                    }
                    y
                }
                NodeKind::Activation(act) => {
                    let y = match act {
                        Activation::Base(kind) => cur.activation(*kind)?,
                        Activation::Blend { base, lambda } => cur.blend(*base, T::c(*lambda))?,
                        Activation::Series(p) => {
                            let vars = SeriesParamKind::ALL.map(|k| bind(p.get(k), &mut param_vars));
                            series::series_forward(cur, p.base, p.terms(), vars)?
                        }
                    };
                    if capture {
                        captures.push((idx, y));
                    }
                    y
                }
                NodeKind::MaxPool { k, stride } => nn::max_pool(cur, *k, *stride)?,
                NodeKind::AvgPool { k, stride } => nn::avg_pool(cur, *k, *stride)?,
                NodeKind::GlobalAvgPool => nn::global_avg_pool(cur)?,
                NodeKind::Linear(l) => {
                    let w = bind(&l.weight, &mut param_vars);
                    let b = bind(&l.bias, &mut param_vars);
                    nn::linear(cur, w, b)?
                }
                NodeKind::Dropout { p } => nn::dropout(cur, *p, mode, rng)?,
                NodeKind::ResidualBegin => {
                    stack.push(cur);
                    cur
                }
                NodeKind::ResidualEnd { projection } => {
                    let skip = stack
                        .pop()
                        .ok_or_else(|| Error::shape("LayerGraph", format!("{}: unbalanced residual end", node.name)))?;
                    let skip = match projection {
                        None => skip,
                        Some(p) => {
                            let w = bind(&p.conv.weight, &mut param_vars);
                            let b = bind(&p.conv.bias, &mut param_vars);
                            let y = nn::conv2d(skip, w, b, p.conv.stride, p.conv.pad)?;
                            match &p.bn {
                                None => y,
                                Some(bn) => {
                                    let g = bind(&bn.gamma, &mut param_vars);
                                    let be = bind(&bn.beta, &mut param_vars);
                                    let (y, stats) = nn::batch_norm(y, g, be, bn, mode)?;
                                    if let Some(s) = stats {
                                        batch_stats.push((BnSlot::Projection(idx), s));
                                    }
                                    y
                                }
                            }
                        }
                    };
                    cur.add(skip)?
                }
            };
        }
        Ok(ForwardPass {
            output: cur,
            param_vars,
            batch_stats,
            captures,
        })
    }

    /// Eval-style inference on a fresh tape; uses the graph's current mode.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let mut rng = crate::rng::stream(0, crate::rng::Stream::Dropout);
        let pass = self.forward(&tape, tape.constant(x.clone()), &mut rng, false)?;
        let out = (*pass.output.value()).clone();
        Ok(out)
    }

    /// Copies gradients from a backward pass onto the parameters.
    pub fn apply_grads(&mut self, grads: &mut Gradients<T>, param_vars: &[Var<'_, T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != param_vars.len() {
            return Err(Error::shape(
                "apply_grads",
                format!("{} params but {} bound vars", params.len(), param_vars.len()),
            ));
        }
        for (p, v) in params.iter_mut().zip(param_vars) {
            // a parameter the loss does not reach has a zero gradient
            p.param.grad = Some(
                grads
                    .take_id(v.id())
                    .unwrap_or_else(|| Tensor::zeros(p.param.value.shape().to_vec())),
            );
        }
        Ok(())
    }

    pub fn apply_batch_stats(&mut self, stats: &[(BnSlot, BatchStats<T>)]) {
        for (slot, s) in stats {
            let bn = match *slot {
                BnSlot::Node(i) => match &mut self.nodes[i].kind {
                    NodeKind::BatchNorm(bn) => Some(bn),
                    _ => None,
                },
                BnSlot::Projection(i) => match &mut self.nodes[i].kind {
                    NodeKind::ResidualEnd {
                        projection: Some(Projection { bn: Some(bn), .. }),
                    } => Some(bn),
                    _ => None,
                },
            };
            if let Some(bn) = bn {
                bn.update_running(s);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.param.grad = None;
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> LayerGraph<U> {
        fn param<T: Real, U: Real>(p: &Param<T>) -> Param<U> {
            Param::new(p.value.cast())
        }
        fn conv<T: Real, U: Real>(c: &ConvLayer<T>) -> ConvLayer<U> {
            ConvLayer {
                weight: param(&c.weight),
                bias: param(&c.bias),
                stride: c.stride,
                pad: c.pad,
            }
        }
        fn bn<T: Real, U: Real>(b: &BatchNormState<T>) -> BatchNormState<U> {
            BatchNormState {
                gamma: param(&b.gamma),
                beta: param(&b.beta),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                eps: b.eps,
                momentum: b.momentum,
                tracked: b.tracked,
            }
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                name: n.name.clone(),
                kind: match &n.kind {
                    NodeKind::Conv(c) => NodeKind::Conv(conv(c)),
                    NodeKind::BatchNorm(b) => NodeKind::BatchNorm(bn(b)),
                    NodeKind::Activation(a) => NodeKind::Activation(match a {
                        Activation::Base(k) => Activation::Base(*k),
                        Activation::Blend { base, lambda } => Activation::Blend {
                            base: *base,
                            lambda: *lambda,
                        },
                        Activation::Series(p) => Activation::Series(SeriesActivationParams {
                            base: p.base,
                            theta: param(&p.theta),
                            omega: param(&p.omega),
                            alpha: param(&p.alpha),
                            shift: param(&p.shift),
                        }),
                    }),
                    NodeKind::MaxPool { k, stride } => NodeKind::MaxPool { k: *k, stride: *stride },
                    NodeKind::AvgPool { k, stride } => NodeKind::AvgPool { k: *k, stride: *stride },
                    NodeKind::GlobalAvgPool => NodeKind::GlobalAvgPool,
                    NodeKind::Linear(l) => NodeKind::Linear(Linear {
                        weight: param(&l.weight),
                        bias: param(&l.bias),
                    }),
                    NodeKind::Dropout { p } => NodeKind::Dropout { p: *p },
                    NodeKind::ResidualBegin => NodeKind::ResidualBegin,
                    NodeKind::ResidualEnd { projection } => NodeKind::ResidualEnd {
                        projection: projection.as_ref().map(|p| Projection {
                            conv: conv(&p.conv),
                            bn: p.bn.as_ref().map(bn),
                        }),
                    },
                },
            })
            .collect();
        LayerGraph {
            nodes,
            mode: self.mode,
            input_shape: self.input_shape,
            classes: self.classes,
        }
    }
}

fn conv_out<T: Real>(conv: &ConvLayer<T>, cur: &[usize]) -> Result<Vec<usize>> {
    let &[c, h, w] = cur else {
        return Err(Error::shape("conv", format!("expected C,H,W, got {cur:?}")));
    };
    if c != conv.c_in() {
        return Err(Error::shape(
            "conv",
            format!("{c} channels into conv expecting {}", conv.c_in()),
        ));
    }
    let k = conv.kernel();
    if h + 2 * conv.pad < k || w + 2 * conv.pad < k {
        return Err(Error::shape("conv", format!("kernel {k} larger than padded {h}x{w}")));
    }
    let (oh, ow) = conv.out_hw(h, w);
    Ok(vec![conv.c_out(), oh, ow])
}
