use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{LayerGraph, ParamRole};
use crate::error::{Error, Result};
use crate::nn::{self, LossKind, Mode};
use crate::rng::{self, Stream};
use crate::tensor::{relative_error, FaultSite, Tape, Tensor};

/// Settings of a whole-network gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// A group passes when its largest relative error is below this.
    pub tolerance: f64,
    pub batch: usize,
    pub seed: u64,
    /// Eval mode by default: with batch statistics, every parameter feeding
    /// a batch norm only through a per-channel shift or scale has an exactly
    /// cancelled gradient, and the check would compare rounding noise.
    pub mode: Mode,
    pub loss: LossKind,
    /// Tensors larger than this are checked on a random subset of this many
    /// elements; smaller tensors are checked exhaustively.
    pub max_elements: usize,
    pub fault: Option<(FaultSite, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            batch: 2,
            seed: 0,
            mode: Mode::Eval,
            loss: LossKind::CrossEntropy,
            max_elements: 64,
            fault: None,
        }
    }
}

/// Largest error over the checked elements of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub role: ParamRole,
    pub checked: usize,
    /// Elements whose perturbation moved some activation across a kink or
    /// changed a max-pool winner; the central difference is meaningless there.
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Largest error over every tensor with the same role.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub role: ParamRole,
    pub tensors: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
    /// Smallest distance of any kinked input to its kink at the probe point.
    pub kink_margin: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn group(&self, role: ParamRole) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.role == role)
    }

    pub fn failing_groups(&self) -> Vec<ParamRole> {
        self.groups.iter().filter(|g| !g.pass).map(|g| g.role).collect()
    }
}

struct Probe {
    loss: f64,
    margin: f64,
    signature: u64,
}

fn probe(g: &LayerGraph<f64>, x: &Tensor<f64>, labels: &[usize], opts: &GradcheckOptions) -> Result<Probe> {
    let tape = Tape::with_kink_tracking();
    let mut drop_rng = rng::stream(opts.seed, Stream::Dropout);
    let pass = g.forward(&tape, tape.constant(x.clone()), &mut drop_rng, false)?;
    let loss = nn::loss(opts.loss, pass.output, labels)?;
    Ok(Probe {
        loss: loss.value().item()?,
        margin: tape.kink_margin(),
        signature: tape.kink_signature(),
    })
}

/// Compares back-propagated parameter gradients with central finite
/// differences of the training loss on a random `batch`-sample input.
/// Elements whose ± h perturbation lands on a different smooth piece of the
/// network (see [`Tape::kink_signature`]) are skipped and counted.
pub fn gradcheck_graph(graph: &LayerGraph<f64>, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.batch == 0 || opts.h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "batch {} and step {} must be positive",
            opts.batch, opts.h
        )));
    }
    let mut g = graph.clone();
    g.set_mode(opts.mode);
    let [c, hgt, wid] = g.input_shape;
    let mut data_rng = rng::stream(opts.seed, Stream::Gradcheck);
    let x = Tensor::<f64>::randn([opts.batch, c, hgt, wid], 1.0, &mut data_rng);
    let labels: Vec<usize> = (0..opts.batch).map(|_| data_rng.random_range(0..g.classes)).collect();
    let base = probe(&g, &x, &labels, opts)?;

    let tape = Tape::new();
    if let Some((site, factor)) = opts.fault {
        tape.inject_fault(site, factor);
    }
    let mut drop_rng = rng::stream(opts.seed, Stream::Dropout);
    let pass = g.forward(&tape, tape.constant(x.clone()), &mut drop_rng, false)?;
    let loss = nn::loss(opts.loss, pass.output, &labels)?;
    let grads = loss.backward()?;
    let analytic: Vec<Tensor<f64>> = pass
        .param_vars
        .iter()
        .zip(g.params())
        .map(|(v, p)| grads.get(v).cloned().ok_or_else(|| Error::MissingGrad(p.name.clone())))
        .collect::<Result<_>>()?;
    drop(grads);

    let meta: Vec<(String, ParamRole, usize)> = g
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.role, p.param.value.numel()))
        .collect();
    let mut pick_rng = rng::stream(opts.seed, Stream::Probe);
    let mut tensors = Vec::with_capacity(meta.len());
    for (pi, (name, role, numel)) in meta.into_iter().enumerate() {
        let indices: Vec<usize> = if numel <= opts.max_elements {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut pick_rng, numel, opts.max_elements).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel_err: f64 = 0.0;
        let mut skipped = 0;
        for &i in &indices {
            let orig = g.params()[pi].param.value.data()[i];
            let mut eval_at = |v: f64| -> Result<Probe> {
                g.params_mut()[pi].param.value.data_mut()[i] = v;
                probe(&g, &x, &labels, opts)
            };
            let up = eval_at(orig + opts.h)?;
            let down = eval_at(orig - opts.h)?;
            g.params_mut()[pi].param.value.data_mut()[i] = orig;
            if up.signature != base.signature || down.signature != base.signature {
                skipped += 1;
                continue;
            }
            let numeric = (up.loss - down.loss) / (2.0 * opts.h);
            let err = relative_error(analytic[pi].data()[i], numeric);
            max_rel_err = max_rel_err.max(err);
        }
        tensors.push(TensorCheck {
            name,
            role,
            checked: indices.len() - skipped,
            skipped,
            max_rel_err,
        });
    }

    let mut by_role: BTreeMap<ParamRole, GroupCheck> = BTreeMap::new();
    for t in &tensors {
        let e = by_role.entry(t.role).or_insert(GroupCheck {
            role: t.role,
            tensors: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            pass: true,
        });
        e.tensors += 1;
        e.checked += t.checked;
        e.skipped += t.skipped;
        e.max_rel_err = e.max_rel_err.max(t.max_rel_err);
    }
    let groups = by_role
        .into_values()
        .map(|mut gc| {
            gc.pass = gc.checked > 0 && gc.max_rel_err < opts.tolerance;
            gc
        })
        .collect();
    Ok(GradcheckReport {
        tensors,
        groups,
        tolerance: opts.tolerance,
        kink_margin: base.margin,
    })
}
