use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::activation::{sigmoid, BaseActivation};

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{Real, Tensor};

/// Backward rules that can be deliberately corrupted to exercise gradient
/// checkers. Never set outside of tests and fault-injection runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultSite {
    SeriesTheta,
    SeriesOmega,
    BatchNormGamma,
    BatchNormBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Tanh,
    Sqrt,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Unary {
        kind: Unary,
        a: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Shift {
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Im2Col {
        x: usize,
        geom: ConvGeometry,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    ChannelAdd {
        x: usize,
        b: usize,
    },
    ChannelMul {
        x: usize,
        s: usize,
    },
    Reduce {
        x: usize,
        axes: Vec<usize>,
        mean: bool,
    },
    Activation {
        x: usize,
        kind: BaseActivation,
    },
    Blend {
        x: usize,
        kind: BaseActivation,
        lambda: T,
    },
    Series {
        x: usize,
        theta: usize,
        omega: usize,
        alpha: usize,
        shift: usize,
        kind: BaseActivation,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        geom: PoolGeometry,
    },
    Mask {
        x: usize,
        mask: Rc<Vec<T>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    faults: Vec<(FaultSite, T)>,
    track_kinks: bool,
    kink_margin: T,
    kink_signature: u64,
}

const SIGNATURE_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const SIGNATURE_PRIME: u64 = 0x0100_0000_01b3;

/// Ordered record of primitive ops. Every op's inputs precede it, so a
/// single reverse sweep computes all gradients.
pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Result of a backward pass: gradients of the loss with respect to every
/// gradient-carrying leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take_id(&mut self, id: usize) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
                faults: Vec::new(),
                track_kinks: false,
                kink_margin: T::infinity(),
                kink_signature: SIGNATURE_SEED,
            }),
        }
    }

    /// A tape that also records [`Tape::kink_margin`] and
    /// [`Tape::kink_signature`]; plain tapes skip that bookkeeping.
    pub fn with_kink_tracking() -> Self {
        let tape = Self::new();
        tape.inner.borrow_mut().track_kinks = true;
        tape
    }

    fn tracks_kinks(&self) -> bool {
        self.inner.borrow().track_kinks
    }

    /// Gradient-carrying leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded op so the tape can be reused.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
        inner.kink_margin = T::infinity();
        inner.kink_signature = SIGNATURE_SEED;
    }

    /// Multiplies the gradient produced by one backward rule by `factor`.
    pub fn inject_fault(&self, site: FaultSite, factor: T) {
        self.inner.borrow_mut().faults.push((site, factor));
    }

    /// Smallest distance, over every kinked activation input and max-pool
    /// window seen so far, to a point where the recorded function is not
    /// differentiable. Infinite unless the tape tracks kinks.
    pub fn kink_margin(&self) -> T {
        self.inner.borrow().kink_margin
    }

    /// Hash of which side of every kink each recorded input fell on and of
    /// every max-pool winner. Two passes with equal signatures evaluate the
    /// same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.inner.borrow().kink_signature
    }

    fn note_words(&self, words: impl Iterator<Item = u64>) {
        let mut inner = self.inner.borrow_mut();
        let mut h = inner.kink_signature;
        for w in words {
            h = (h ^ w).wrapping_mul(SIGNATURE_PRIME);
        }
        inner.kink_signature = h;
    }

    fn note_signs(&self, signs: impl Iterator<Item = bool>) {
        let mut word = 0u64;
        let mut bits = 0;
        let mut words = Vec::new();
        for s in signs {
            word = (word << 1) | u64::from(s);
            bits += 1;
            if bits == 64 {
                words.push(word);
                word = 0;
                bits = 0;
            }
        }
        words.push(word ^ ((bits as u64) << 56));
        self.note_words(words.into_iter());
    }

    fn note_margin(&self, margin: T) {
        let mut inner = self.inner.borrow_mut();
        inner.kink_margin = inner.kink_margin.min(margin);
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, leaf_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => leaf_grad,
            other => inputs(other).iter().any(|&i| inner.nodes[i].needs_grad),
        };
        #[cfg(debug_assertions)]
        if !matches!(op, Op::Leaf) {
            let finite_in = inputs(&op).iter().all(|&i| inner.nodes[i].value.is_finite());
            debug_assert!(!finite_in || value.is_finite(), "non-finite output from finite inputs");
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn fault(&self, site: FaultSite) -> T {
        self.inner
            .borrow()
            .faults
            .iter()
            .filter(|(s, _)| *s == site)
            .fold(T::one(), |acc, (_, f)| acc * *f)
    }

    fn backward_from(&self, loss: usize) -> Result<Gradients<T>> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            let shape = inner.nodes[loss].value.shape().to_vec();
            if inner.nodes[loss].value.numel() != 1 {
                return Err(Error::NotScalar(shape));
            }
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut sink = Sink {
                nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Binary { kind, a, b, broadcast } => {
                    backward_binary(&mut sink, *kind, *a, *b, *broadcast, &g);
                }
                Op::Unary { kind, a } => {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    let d: Vec<T> = match kind {
                        Unary::Neg => g.iter().map(|&gi| -gi).collect(),
                        Unary::Exp => g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect(),
                        Unary::Ln => g.iter().zip(x).map(|(&gi, &xi)| gi / xi).collect(),
                        Unary::Tanh => g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect(),
                        Unary::Sqrt => g.iter().zip(y).map(|(&gi, &yi)| gi / (yi + yi)).collect(),
                    };
                    sink.add(*a, d);
                }
                Op::Scale { a, c } => sink.add(*a, g.iter().map(|&gi| gi * *c).collect()),
                Op::Shift { a } => sink.add(*a, g),
                Op::MatMul { a, b, m, k, n } => {
                    if sink.wants(*a) {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(*m, *n, *k, &g, false, nodes[*b].value.data(), true, T::zero(), &mut da);
                        sink.add(*a, da);
                    }
                    if sink.wants(*b) {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(*k, *m, *n, nodes[*a].value.data(), true, &g, false, T::zero(), &mut db);
                        sink.add(*b, db);
                    }
                }
                Op::Im2Col { x, geom } => sink.add(*x, kernels::col2im(&g, geom)),
                Op::Reshape { x } => sink.add(*x, g),
                Op::Permute { x, axes } => {
                    let (d, _) = kernels::permute(&g, node.value.shape(), &kernels::inverse_axes(axes));
                    sink.add(*x, d);
                }
                Op::ChannelAdd { x, b } => {
                    let shape = nodes[*x].value.shape();
                    let (c, inner_len) = (shape[1], shape[2..].iter().product::<usize>());
                    if sink.wants(*b) {
                        let mut db = vec![T::zero(); c];
                        for (j, row) in g.chunks(inner_len.max(1)).enumerate() {
                            let ch = j % c;
                            db[ch] = row.iter().fold(db[ch], |s, &v| s + v);
                        }
                        sink.add(*b, db);
                    }
                    sink.add(*x, g);
                }
                Op::ChannelMul { x, s } => {
                    let xv = nodes[*x].value.data();
                    let sv = nodes[*s].value.data();
                    let shape = nodes[*x].value.shape();
                    let (c, inner_len) = (shape[1], shape[2..].iter().product::<usize>());
                    if sink.wants(*s) {
                        let mut ds = vec![T::zero(); c];
                        let step = inner_len.max(1);
                        for (j, (gr, xr)) in g.chunks(step).zip(xv.chunks(step)).enumerate() {
                            let ch = j % c;
                            ds[ch] = gr.iter().zip(xr).fold(ds[ch], |s, (&gi, &xi)| s + gi * xi);
                        }
                        sink.add(*s, ds);
                    }
                    if sink.wants(*x) {
                        sink.add(*x, channel_map(&g, c, inner_len, |v, ch| v * sv[ch]));
                    }
                }
                Op::Reduce { x, axes, mean } => {
                    let in_shape = nodes[*x].value.shape();
                    let map = reduce_map(in_shape, axes);
                    let scale = if *mean {
                        T::one() / T::c(reduced_count(in_shape, axes) as f64)
                    } else {
                        T::one()
                    };
                    sink.add(*x, map.iter().map(|&o| g[o] * scale).collect());
                }
                Op::Activation { x, kind } => {
                    let xv = nodes[*x].value.data();
                    sink.add(
                        *x,
                        g.iter().zip(xv).map(|(&gi, &xi)| gi * kind.derivative(xi)).collect(),
                    );
                }
                Op::Blend { x, kind, lambda } => {
                    let xv = nodes[*x].value.data();
                    let keep = T::one() - *lambda;
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| gi * (keep * kind.derivative(xi) + *lambda))
                        .collect();
                    sink.add(*x, d);
                }
                Op::Series {
                    x,
                    theta,
                    omega,
                    alpha,
                    shift,
                    kind,
                } => {
                    let theta_fault = self.fault(FaultSite::SeriesTheta);
                    let omega_fault = self.fault(FaultSite::SeriesOmega);
                    backward_series(
                        &mut sink,
                        SeriesIds {
                            x: *x,
                            theta: *theta,
                            omega: *omega,
                            alpha: *alpha,
                            shift: *shift,
                        },
                        *kind,
                        &g,
                        theta_fault,
                        omega_fault,
                    );
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = nodes[*x].value.shape();
                    let (n, c, inner_len) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                    let gv = nodes[*gamma].value.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner_len;
                            for i in base..base + inner_len {
                                dbeta[ch] = dbeta[ch] + g[i];
                                dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            }
                        }
                    }
                    if sink.wants(*x) {
                        let count = T::c((n * inner_len) as f64);
                        let mut dx = vec![T::zero(); g.len()];
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * inner_len;
                                let k = gv[ch] * inv_std[ch];
                                for i in base..base + inner_len {
                                    dx[i] = if *batch_stats {
                                        k / count * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                        sink.add(*x, dx);
                    }
                    let gf = self.fault(FaultSite::BatchNormGamma);
                    let bf = self.fault(FaultSite::BatchNormBeta);
                    sink.add(*gamma, dgamma.into_iter().map(|v| v * gf).collect());
                    sink.add(*beta, dbeta.into_iter().map(|v| v * bf).collect());
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![T::zero(); nodes[*x].value.numel()];
                    for (&gi, &src) in g.iter().zip(argmax) {
                        dx[src] = dx[src] + gi;
                    }
                    sink.add(*x, dx);
                }
                Op::AvgPool { x, geom } => sink.add(*x, kernels::avgpool_backward(&g, geom)),
                Op::Mask { x, mask } => sink.add(*x, g.iter().zip(mask.iter()).map(|(&gi, &m)| gi * m).collect()),
                Op::CrossEntropy { logits, labels, probs } => {
                    let rows = labels.len();
                    let k = probs.len() / rows;
                    let scale = g[0] / T::c(rows as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        d[r * k + y] = d[r * k + y] - scale;
                    }
                    sink.add(*logits, d);
                }
                Op::BceWithLogits { logits, targets, probs } => {
                    let scale = g[0] / T::c(probs.len() as f64);
                    sink.add(
                        *logits,
                        probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect(),
                    );
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Applies `f(value, channel)` over an `[n, c, inner..]` buffer.
fn channel_map<T: Real>(x: &[T], c: usize, inner_len: usize, f: impl Fn(T, usize) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (j, row) in x.chunks(inner_len.max(1)).enumerate() {
        let ch = j % c;
        out.extend(row.iter().map(|&v| f(v, ch)));
    }
    out
}

struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Sink<'_, T> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn add(&mut self, id: usize, d: Vec<T>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(d).for_each(|(a, v)| *a = *a + v),
            slot @ None => *slot = Some(d),
        }
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Unary { a, .. } | Op::Scale { a, .. } | Op::Shift { a } => vec![*a],
        Op::Im2Col { x, .. }
        | Op::Reshape { x }
        | Op::Permute { x, .. }
        | Op::Reduce { x, .. }
        | Op::Activation { x, .. }
        | Op::Blend { x, .. }
        | Op::MaxPool { x, .. }
        | Op::AvgPool { x, .. }
        | Op::Mask { x, .. } => vec![*x],
        Op::ChannelAdd { x, b } => vec![*x, *b],
        Op::ChannelMul { x, s } => vec![*x, *s],
        Op::Series {
            x,
            theta,
            omega,
            alpha,
            shift,
            ..
        } => vec![*x, *theta, *omega, *alpha, *shift],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
    }
}

fn backward_binary<T: Real>(sink: &mut Sink<'_, T>, kind: Binary, a: usize, b: usize, broadcast: bool, g: &[T]) {
    let av = sink.nodes[a].value.data();
    let bv = sink.nodes[b].value.data();
    let bat = |i: usize| if broadcast { bv[0] } else { bv[i] };
    let (da, db): (Vec<T>, Vec<T>) = match kind {
        Binary::Add => (g.to_vec(), g.to_vec()),
        Binary::Sub => (g.to_vec(), g.iter().map(|&gi| -gi).collect()),
        Binary::Mul => (
            g.iter().enumerate().map(|(i, &gi)| gi * bat(i)).collect(),
            g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect(),
        ),
        Binary::Div => (
            g.iter().enumerate().map(|(i, &gi)| gi / bat(i)).collect(),
            g.iter()
                .zip(av)
                .enumerate()
                .map(|(i, (&gi, &ai))| -gi * ai / (bat(i) * bat(i)))
                .collect(),
        ),
    };
    let want_b = sink.wants(b);
    sink.add(a, da);
    if want_b {
        let db = if broadcast {
            vec![db.into_iter().fold(T::zero(), |s, v| s + v)]
        } else {
            db
        };
        sink.add(b, db);
    }
}

struct SeriesIds {
    x: usize,
    theta: usize,
    omega: usize,
    alpha: usize,
    shift: usize,
}

/// Terms sharing an identical shift are evaluated once with their
/// amplitude products summed in term order.
struct ShiftGroup<T> {
    shift: T,
    coeff: T,
    members: Vec<usize>,
}

fn shift_groups<T: Real>(theta: &[T], alpha: &[T], shift: &[T]) -> Vec<ShiftGroup<T>> {
    let mut groups: Vec<ShiftGroup<T>> = Vec::new();
    for n in 0..theta.len() {
        let c = theta[n] * alpha[n];
        match groups.iter_mut().find(|grp| grp.shift == shift[n]) {
            Some(grp) => {
                grp.coeff = grp.coeff + c;
                grp.members.push(n);
            }
            None => groups.push(ShiftGroup {
                shift: shift[n],
                coeff: c,
                members: vec![n],
            }),
        }
    }
    groups
}

fn backward_series<T: Real>(
    sink: &mut Sink<'_, T>,
    ids: SeriesIds,
    kind: BaseActivation,
    g: &[T],
    theta_fault: T,
    omega_fault: T,
) {
    let xv = sink.nodes[ids.x].value.data();
    let theta = sink.nodes[ids.theta].value.data();
    let alpha = sink.nodes[ids.alpha].value.data();
    let shift = sink.nodes[ids.shift].value.data();
    let terms = theta.len();
    let groups = shift_groups(theta, alpha, shift);

    let mut dx = vec![T::zero(); xv.len()];
    let mut dtheta = vec![T::zero(); terms];
    let mut dalpha = vec![T::zero(); terms];
    let mut dshift = vec![T::zero(); terms];
    let gsum = g.iter().fold(T::zero(), |s, &v| s + v);
    for grp in &groups {
        let mut value_dot = T::zero();
        let mut slope_dot = T::zero();
        for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
            let z = xi + grp.shift;
            let slope = kind.derivative(z);
            value_dot = value_dot + gi * kind.eval(z);
            slope_dot = slope_dot + gi * slope;
            dx[i] = dx[i] + grp.coeff * gi * slope;
        }
        for &n in &grp.members {
            dtheta[n] = alpha[n] * value_dot * theta_fault;
            dalpha[n] = theta[n] * value_dot;
            dshift[n] = theta[n] * alpha[n] * slope_dot;
        }
    }
    sink.add(ids.x, dx);
    sink.add(ids.theta, dtheta);
    sink.add(ids.omega, vec![gsum * omega_fault; terms]);
    sink.add(ids.alpha, dalpha);
    sink.add(ids.shift, dshift);
}

/// For each input element, the flat index of the output it reduces into.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = (0..shape.len())
        .filter(|d| !axes.contains(d))
        .map(|d| shape[d])
        .collect();
    let out_strides = kernels::strides(&out_shape);
    let mut dim_stride = vec![0usize; shape.len()];
    let mut k = 0;
    for (d, stride) in dim_stride.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *stride = out_strides[k];
            k += 1;
        }
    }
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0;
    for _ in 0..total {
        map.push(offset);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            offset += dim_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= dim_stride[d] * shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduced_count(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&a| shape[a]).product()
}

fn check_same_or_scalar(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.numel() == 1 {
        Ok(true)
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

// fallible, so not the operator traits
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, kind: Binary, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let broadcast = check_same_or_scalar(name, &a, &b)?;
        let bv = b.data();
        let bat = |i: usize| if broadcast { bv[0] } else { bv[i] };
        if kind == Binary::Div && bv.iter().any(|v| v.is_zero()) {
            return Err(Error::DomainError {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| match kind {
                Binary::Add => x + bat(i),
                Binary::Sub => x - bat(i),
                Binary::Mul => x * bat(i),
                Binary::Div => x / bat(i),
            })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                broadcast,
            },
            false,
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Div, other)
    }

    fn unary(self, kind: Unary) -> Result<Var<'t, T>> {
        let a = self.value();
        match kind {
            Unary::Ln if a.data().iter().any(|&v| v <= T::zero()) => {
                return Err(Error::DomainError {
                    op: "ln",
                    detail: "non-positive argument".into(),
                })
            }
            Unary::Sqrt if a.data().iter().any(|&v| v < T::zero()) => {
                return Err(Error::DomainError {
                    op: "sqrt",
                    detail: "negative argument".into(),
                })
            }
            _ => {}
        }
        let out = a.map(|v| match kind {
            Unary::Neg => -v,
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Tanh => v.tanh(),
            Unary::Sqrt => v.sqrt(),
        });
        Ok(self.tape.push(out, Op::Unary { kind, a: self.id }, false))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Neg)
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Ln)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Tanh)
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sqrt)
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::Scale { a: self.id, c }, false)
    }

    pub fn shift(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape.push(out, Op::Shift { a: self.id }, false)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?} needs rank-2 operands", a.shape(), b.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut c);
        let out = Tensor::new([m, n], c)?;
        Ok(self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            false,
        ))
    }

    /// Unrolls `k×k` receptive fields into columns: the result is
    /// `(C·k·k) × (N·H_out·W_out)`.
    pub fn im2col(self, k: usize, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let geom = ConvGeometry::new(x.shape(), k, stride, pad)?;
        let out = Tensor::new([geom.rows(), geom.cols()], kernels::im2col(x.data(), &geom))?;
        Ok(self.tape.push(out, Op::Im2Col { x: self.id, geom }, false))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { x: self.id }, false))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {}", x.rank()),
            ));
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), axes);
        let out = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            out,
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
            false,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        self.permute(&[1, 0])
    }

    fn channel_check(&self, op: &'static str, x: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
        if x.rank() < 2 || v.shape() != [x.shape()[1]] {
            return Err(Error::shape(
                op,
                format!("per-channel vector {:?} for input {:?}", v.shape(), x.shape()),
            ));
        }
        Ok((x.shape()[1], x.shape()[2..].iter().product()))
    }

    /// Adds `b[c]` along channel axis 1.
    pub fn add_channel(self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b);
        let (x, bv) = (self.value(), b.value());
        let (c, inner_len) = self.channel_check("add_channel", &x, &bv)?;
        let bd = bv.data();
        let data = channel_map(x.data(), c, inner_len, |v, ch| v + bd[ch]);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::ChannelAdd { x: self.id, b: b.id }, false))
    }

    /// Multiplies by `s[c]` along channel axis 1.
    pub fn mul_channel(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s);
        let (x, sv) = (self.value(), s.value());
        let (c, inner_len) = self.channel_check("mul_channel", &x, &sv)?;
        let sd = sv.data();
        let data = channel_map(x.data(), c, inner_len, |v, ch| v * sd[ch]);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::ChannelMul { x: self.id, s: s.id }, false))
    }

    fn reduce(self, axes: &[usize], mean: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::InvalidAxis { axis: bad, rank });
        }
        let out_shape: Vec<usize> = (0..rank).filter(|d| !axes.contains(d)).map(|d| x.shape()[d]).collect();
        let mut acc = vec![T::zero(); out_shape.iter().product()];
        for (&v, &o) in x.data().iter().zip(&reduce_map(x.shape(), &axes)) {
            acc[o] = acc[o] + v;
        }
        if mean {
            let count = T::c(reduced_count(x.shape(), &axes) as f64);
            acc.iter_mut().for_each(|v| *v = *v / count);
        }
        let out = Tensor::new(out_shape, acc)?;
        Ok(self.tape.push(out, Op::Reduce { x: self.id, axes, mean }, false))
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(axes, false)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t, T>> {
        self.reduce(axes, true)
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        self.reduce(&(0..rank).collect::<Vec<_>>(), false)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let rank = self.value().rank();
        self.reduce(&(0..rank).collect::<Vec<_>>(), true)
    }

    pub fn activation(self, kind: BaseActivation) -> Result<Var<'t, T>> {
        let x = self.value();
        if kind.has_kink() && self.tape.tracks_kinks() {
            self.tape.note_margin(x.max_abs_min());
            self.tape.note_signs(x.data().iter().map(|&v| v > T::zero()));
        }
        let out = x.map(|v| kind.eval(v));
        Ok(self.tape.push(out, Op::Activation { x: self.id, kind }, false))
    }

    /// `(1 − λ)·f(x) + λ·x`.
    pub fn blend(self, kind: BaseActivation, lambda: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if kind.has_kink() && lambda < T::one() && self.tape.tracks_kinks() {
            self.tape.note_margin(x.max_abs_min());
            self.tape.note_signs(x.data().iter().map(|&v| v > T::zero()));
        }
        let keep = T::one() - lambda;
        let out = x.map(|v| keep * kind.eval(v) + lambda * v);
        Ok(self.tape.push(
            out,
            Op::Blend {
                x: self.id,
                kind,
                lambda,
            },
            false,
        ))
    }

    /// `Σ_n θ_n·α_n·f(x + b_n) + ω_n` elementwise, every term vector of
    /// equal length `N ≥ 1`.
    pub fn series(
        self,
        kind: BaseActivation,
        theta: Var<'t, T>,
        omega: Var<'t, T>,
        alpha: Var<'t, T>,
        shift: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        for v in [&theta, &omega, &alpha, &shift] {
            self.same_tape(v);
        }
        let (x, th, om, al, sh) = (self.value(), theta.value(), omega.value(), alpha.value(), shift.value());
        let terms = th.numel();
        if terms == 0 || [om.shape(), al.shape(), sh.shape()].iter().any(|s| *s != [terms]) || th.shape() != [terms] {
            return Err(Error::shape(
                "series",
                format!(
                    "term vectors must share one length >= 1: {:?} {:?} {:?} {:?}",
                    th.shape(),
                    om.shape(),
                    al.shape(),
                    sh.shape()
                ),
            ));
        }
        let groups = shift_groups(th.data(), al.data(), sh.data());
        let offset = om.data().iter().fold(T::zero(), |s, &v| s + v);
        if kind.has_kink() && self.tape.tracks_kinks() {
            let margin = groups
                .iter()
                .flat_map(|grp| x.data().iter().map(move |&v| (v + grp.shift).abs()))
                .fold(T::infinity(), T::min);
            self.tape.note_margin(margin);
            for &b in sh.data() {
                self.tape.note_signs(x.data().iter().map(|&v| v + b > T::zero()));
            }
        }
        let out = x.map(|v| {
            let mut acc = T::zero();
            for grp in &groups {
                acc = acc + grp.coeff * kind.eval(v + grp.shift);
            }
            acc + offset
        });
        Ok(self.tape.push(
            out,
            Op::Series {
                x: self.id,
                theta: theta.id,
                omega: omega.id,
                alpha: alpha.id,
                shift: shift.id,
                kind,
            },
            false,
        ))
    }

    /// Per-channel affine normalisation. With `stats = None` the batch mean
    /// and biased variance over every axis but 1 are used and returned;
    /// otherwise the supplied `(mean, var)` are applied as constants.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let (c, inner_len) = self.channel_check("batch_norm", &x, &gv)?;
        self.channel_check("batch_norm", &x, &bv)?;
        let n = x.shape()[0];
        let count = n * inner_len;
        let xd = x.data();
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::ChannelMismatch(format!(
                        "running stats for {} channels, input has {c}",
                        m.len()
                    )));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let denom = T::c(count as f64);
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (b * c + ch) * inner_len;
                        *m = *m + xd[base..base + inner_len].iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / denom);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner_len;
                        let mu = mean[ch];
                        var[ch] = var[ch]
                            + xd[base..base + inner_len]
                                .iter()
                                .fold(T::zero(), |s, &v| s + (v - mu) * (v - mu));
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / denom);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = channel_map(xd, c, inner_len, |v, ch| (v - mean[ch]) * inv_std[ch]);
        let (gd, bd) = (gv.data(), bv.data());
        let out = channel_map(&xhat, c, inner_len, |v, ch| v * gd[ch] + bd[ch]);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let var_out = self.tape.push(
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                batch_stats,
            },
            false,
        );
        Ok((var_out, mean, var))
    }

    pub fn max_pool(self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let geom = PoolGeometry::new(x.shape(), k, stride)?;
        let (data, argmax, margin) = kernels::maxpool(x.data(), &geom, self.tape.tracks_kinks());
        if self.tape.tracks_kinks() {
            self.tape.note_margin(margin);
            self.tape.note_words(argmax.iter().map(|&i| i as u64));
        }
        let out = Tensor::new(geom.out_shape(), data)?;
        Ok(self.tape.push(out, Op::MaxPool { x: self.id, argmax }, false))
    }

    pub fn avg_pool(self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let geom = PoolGeometry::new(x.shape(), k, stride)?;
        let out = Tensor::new(geom.out_shape(), kernels::avgpool(x.data(), &geom))?;
        Ok(self.tape.push(out, Op::AvgPool { x: self.id, geom }, false))
    }

    /// Elementwise product with a fixed mask that receives no gradient.
    pub fn mask(self, mask: Vec<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if mask.len() != x.numel() {
            return Err(Error::shape(
                "mask",
                format!("{} mask values for {:?}", mask.len(), x.shape()),
            ));
        }
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::Mask {
                x: self.id,
                mask: Rc::new(mask),
            },
            false,
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        let (rows, k) = logits_shape("cross_entropy", &z, labels)?;
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &z.data()[r * k..(r + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let denom = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp());
            let lse = m + denom.ln();
            total = total + lse - row[y];
            for j in 0..k {
                probs[r * k + j] = (row[j] - m).exp() / denom;
            }
        }
        let out = Tensor::scalar(total / T::c(rows as f64));
        Ok(self.tape.push(
            out,
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            false,
        ))
    }

    /// Sigmoid binary cross-entropy against one-hot targets, averaged over
    /// batch and classes.
    pub fn bce_with_logits(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let z = self.value();
        let (rows, k) = logits_shape("bce_with_logits", &z, labels)?;
        let mut targets = vec![T::zero(); rows * k];
        for (r, &y) in labels.iter().enumerate() {
            targets[r * k + y] = T::one();
        }
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(rows * k);
        for (&zi, &ti) in z.data().iter().zip(&targets) {
            total = total + zi.max(T::zero()) - zi * ti + (-zi.abs()).exp().ln_1p();
            probs.push(sigmoid(zi));
        }
        let out = Tensor::scalar(total / T::c((rows * k) as f64));
        Ok(self.tape.push(
            out,
            Op::BceWithLogits {
                logits: self.id,
                targets,
                probs,
            },
            false,
        ))
    }

    /// Reverse sweep from this scalar. A tape supports one sweep until
    /// [`Tape::reset`].
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }
}

fn logits_shape<T: Real>(op: &'static str, z: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let &[rows, k] = z.shape() else {
        return Err(Error::shape(op, format!("logits must be [N, K], got {:?}", z.shape())));
    };
    if k < 2 {
        return Err(Error::shape(op, format!("need at least 2 classes, got {k}")));
    }
    if labels.len() != rows {
        return Err(Error::shape(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok((rows, k))
}

impl<T: Real> Tensor<T> {
    fn max_abs_min(&self) -> T {
        self.data().iter().fold(T::infinity(), |m, v| m.min(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let x = tape.constant(t(&[3], &[0.5, -1.5, 2.0]));
        let ones = tape.constant(Tensor::ones([3]));
        assert_eq!(x.mul(ones).unwrap().value().data(), x.value().data());
        let e = tape.constant(t(&[2], &[0.0, 2f64.ln()])).exp().unwrap();
        assert_eq!(e.value().data()[0], 1.0);
        assert!((e.value().data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_errors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(z), Err(Error::DomainError { .. })));
        assert!(matches!(z.ln(), Err(Error::DomainError { .. })));
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(r.matmul(r).is_err());
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum_all().unwrap().value().item().unwrap(), 6.0);
        let y = tape.constant(t(&[2], &[1.0, 3.0]));
        assert_eq!(y.mean_all().unwrap().value().item().unwrap(), 2.0);
        let c = tape.constant(Tensor::full([2, 3, 2, 2], 1.5));
        let m = c.mean(&[0, 2, 3]).unwrap();
        assert_eq!(m.shape(), vec![3]);
        assert!(m.value().data().iter().all(|&v| v == 1.5));
        assert!(matches!(x.sum(&[1]), Err(Error::InvalidAxis { axis: 1, rank: 1 })));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert!(matches!(loss.backward(), Err(Error::TapeConsumed)));

        let tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 0.5, 7.0]));
        let loss = x.scale(5.0).sum_all().unwrap();
        assert!(loss
            .backward()
            .unwrap()
            .get(&x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 5.0));

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(x.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn reset_allows_new_sweep() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        x.mul(x).unwrap().backward().unwrap();
        tape.reset();
        let x = tape.param(Tensor::scalar(3.0));
        let g = x.mul(x).unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn cross_entropy_uniform() {
        let tape = Tape::new();
        let z = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let loss = z.cross_entropy(&[0]).unwrap();
        assert!((loss.value().item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&z).unwrap().data(), &[-0.5, 0.5]);

        let tape = Tape::new();
        let z = tape.param(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let g = z.cross_entropy(&[0, 1]).unwrap().backward().unwrap();
        assert_eq!(g.get(&z).unwrap().data(), &[-0.25, 0.25, 0.25, -0.25]);
        assert!(matches!(
            tape.constant(t(&[1, 2], &[0.0, 0.0])).cross_entropy(&[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn bce_at_zero_logit() {
        let tape = Tape::new();
        let z = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let loss = z.bce_with_logits(&[0]).unwrap();
        assert!((loss.value().item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn series_groups_equal_shifts_exactly() {
        let tape = Tape::new();
        let x = tape.constant(t(&[4], &[-2.0, -0.1, 0.3, 2.0]));
        let third = 1.0 / 3.0;
        let s = x
            .series(
                BaseActivation::Relu,
                tape.constant(Tensor::ones([3])),
                tape.constant(Tensor::zeros([3])),
                tape.constant(Tensor::full([3], third)),
                tape.constant(Tensor::zeros([3])),
            )
            .unwrap();
        assert_eq!(s.value().data(), &[0.0, 0.0, 0.3, 2.0]);
    }

    #[test]
    fn fault_scales_one_rule() {
        let run = |fault: bool| {
            let tape = Tape::new();
            if fault {
                tape.inject_fault(FaultSite::SeriesTheta, 2.0);
            }
            let x = tape.param(t(&[2], &[0.5, 1.5]));
            let th = tape.param(Tensor::ones([1]));
            let om = tape.param(Tensor::zeros([1]));
            let s = x
                .series(
                    BaseActivation::Relu,
                    th,
                    om,
                    tape.constant(Tensor::ones([1])),
                    tape.constant(Tensor::zeros([1])),
                )
                .unwrap()
                .sum_all()
                .unwrap();
            let g = s.backward().unwrap();
            (
                g.get(&th).unwrap().item().unwrap(),
                g.get(&om).unwrap().item().unwrap(),
                g.get(&x).unwrap().clone(),
            )
        };
        let (th0, om0, x0) = run(false);
        let (th1, om1, x1) = run(true);
        assert_eq!(th1, 2.0 * th0);
        assert_eq!(om1, om0);
        assert_eq!(x1, x0);
    }
}
