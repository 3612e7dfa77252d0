//! Gradient checking, alignment sweeps and cost accounting.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learning::{
    batch_loss, cosine_alignment, online_sequence_gradient, relative_error, run_pass, GradientEstimate,
    GradientOptions, RuleKind,
};
use crate::network::{derive_seed, Network};
use crate::tasks::{CopyDataset, CopyTaskConfig, SequenceBatch};
use crate::train::{train, TrainObserver, TrainOutcome};

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+e) - f(p-e)) / 2e`
    #[default]
    Central,
    /// Fourth-order: `(-f(p+2e) + 8f(p+e) - 8f(p-e) + f(p-2e)) / 12e`
    Central4,
    /// Ridders' extrapolation of central differences, starting at step `e` and
    /// shrinking it until the extrapolation error estimate stops improving.
    Ridders,
}

impl std::fmt::Display for Stencil {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stencil::Central => "2",
            Stencil::Central4 => "4",
            Stencil::Ridders => "ridders",
        })
    }
}

impl std::str::FromStr for Stencil {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "2" | "central" => Ok(Stencil::Central),
            "4" | "central4" => Ok(Stencil::Central4),
            "ridders" => Ok(Stencil::Ridders),
            _ => Err(format!("unknown stencil '{s}' (expected 2, 4 or ridders)")),
        }
    }
}

/// Derivative at 0 of `f(delta)`, the objective evaluated at `p + delta`.
pub fn derivative(mut f: impl FnMut(f64) -> Result<f64>, eps: f64, stencil: Stencil) -> Result<f64> {
    let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    match stencil {
        Stencil::Central => central(eps),
        Stencil::Central4 => Ok((4.0 * central(eps)? - central(2.0 * eps)?) / 3.0),
        Stencil::Ridders => {
            const SHRINK: f64 = 1.4;
            const TABLE: usize = 10;
            const SAFE: f64 = 2.0;
            let mut a = [[0.0; TABLE]; TABLE];
            let mut h = eps;
            a[0][0] = central(h)?;
            let (mut best, mut err) = (a[0][0], f64::INFINITY);
            for i in 1..TABLE {
                h /= SHRINK;
                a[0][i] = central(h)?;
                let mut fac = SHRINK * SHRINK;
                for j in 1..=i {
                    a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
                    fac *= SHRINK * SHRINK;
                    let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
                    if e <= err {
                        err = e;
                        best = a[j][i];
                    }
                }
                if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
                    break;
                }
            }
            Ok(best)
        }
    }
}

/// Finite-difference derivative of the summed masked loss with respect to the
/// flat parameter coordinates in `coords` (all coordinates when `None`).
pub fn finite_difference_coords(
    net: &Network,
    batch: &SequenceBatch,
    coords: Option<&[usize]>,
    eps: f64,
    stencil: Stencil,
    options: &GradientOptions,
) -> Result<Vec<f64>> {
    let base = net.to_flat();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut probe = net.clone();
    let mut flat = base.clone();
    let mut loss_at = |k: usize, delta: f64| -> Result<f64> {
        flat[k] = base[k] + delta;
        probe.load_flat(&flat)?;
        let l = batch_loss(&probe, batch, options)?.loss_sum;
        flat[k] = base[k];
        Ok(l)
    };
    let mut out = Vec::with_capacity(coords.len());
    for &k in coords {
        if k >= base.len() {
            return Err(Error::Dimension {
                context: "finite difference coordinate",
                expected: base.len(),
                actual: k,
            });
        }
        out.push(derivative(|delta| loss_at(k, delta), eps, stencil)?);
    }
    Ok(out)
}

/// Finite-difference gradient over every parameter, in the estimate layout.
pub fn finite_difference_gradient(
    net: &Network,
    batch: &SequenceBatch,
    eps: f64,
    stencil: Stencil,
    options: &GradientOptions,
) -> Result<GradientEstimate> {
    let flat = finite_difference_coords(net, batch, None, eps, stencil, options)?;
    let mut g = net.zeros_like();
    g.load_flat(&flat)?;
    Ok(GradientEstimate::from_network(&g, RuleKind::Bptt, batch.steps, batch.batch))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Index (within the tensor) of the worst coordinate.
    pub worst_index: usize,
    pub candidate: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

/// Compares `candidate` to `reference` coordinate-wise on the named tensors
/// (all shared tensors when `names` is `None`).
pub fn compare_gradients(
    candidate: &GradientEstimate,
    reference: &GradientEstimate,
    names: Option<&[String]>,
    floor: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = match names {
        Some(n) => n.to_vec(),
        None => reference.entries.keys().cloned().collect(),
    };
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let (Some(c), Some(r)) = (candidate.get(&name), reference.get(&name)) else {
            return Err(Error::InvalidModel(format!("gradient entry '{name}' missing")));
        };
        if c.len() != r.len() {
            return Err(Error::Dimension {
                context: "compare_gradients",
                expected: r.len(),
                actual: c.len(),
            });
        }
        let errs: Vec<f64> = c.iter().zip(r).map(|(&a, &b)| relative_error(a, b, floor)).collect();
        let (worst_index, max_rel) = errs
            .iter()
            .copied()
            .enumerate()
            .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
        params.push(ParamError {
            mean_rel: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
            candidate: c.get(worst_index).copied().unwrap_or(0.0),
            reference: r.get(worst_index).copied().unwrap_or(0.0),
            name,
            max_rel,
            worst_index,
        });
    }
    Ok(GradCheckReport { params })
}

/// Memory and per-step compute of one network under the online rule,
/// counted in real scalars and real floating-point operations.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub trace_entries: usize,
    pub param_entries: usize,
    pub recurrent_param_entries: usize,
    pub state_entries: usize,
    pub forward_flops: usize,
    pub online_flops: usize,
}

impl CostReport {
    pub fn flop_ratio(&self) -> f64 {
        self.online_flops as f64 / self.forward_flops as f64
    }
}

/// Flop counts follow the kernels: a complex-by-real product is 2 flops, a
/// complex product 6, a complex add 2, and each accumulation 1 per real part.
/// The backward pass through depth is common to all rules and not counted.
pub fn cost_report(net: &Network) -> CostReport {
    let c = &net.config;
    let (n, h, l) = (c.state_size, c.model_size, c.num_layers);
    // B x (4NH), gamma scale (2N), lambda h + (8N), Re[C h] (4NH), D x (2H^2)
    let forward = 8 * n * h + 10 * n + 2 * h * h;
    // e_lambda and e_gamma: lambda e + v (8N each); e_B: lambda e_B (6NH) + gamma x (2NH)
    let traces = 16 * n + 8 * n * h;
    // d_lambda += delta e (8N), d_gamma += Re[delta e] (4N), d_B += delta e_B (8NH)
    let contraction = 12 * n + 8 * n * h;
    CostReport {
        trace_entries: l * 2 * (2 * n + n * h),
        param_entries: net.param_count(),
        recurrent_param_entries: l * net.blocks[0].lru.recurrent_param_count(),
        state_entries: l * 2 * n,
        forward_flops: l * forward,
        online_flops: l * (forward + traces + contraction),
    }
}

/// One alignment measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPoint {
    pub step: usize,
    pub mean_cosine: Option<f64>,
    pub per_layer: Vec<Option<f64>>,
    /// Mean masked loss on the probe batch.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentCurve {
    pub points: Vec<AlignmentPoint>,
}

/// Alignment of `rule` with BPTT on `probe`, with dropout off.
pub fn measure_alignment(net: &Network, probe: &SequenceBatch, rule: RuleKind, step: usize) -> Result<AlignmentPoint> {
    let options = GradientOptions::default();
    let exact = run_pass(net, probe, RuleKind::Bptt, &options)?;
    let exact_est = GradientEstimate::from_network(&exact.grads, RuleKind::Bptt, probe.steps, probe.batch);
    let estimate = if rule == RuleKind::Bptt {
        exact_est.clone()
    } else {
        online_sequence_gradient(net, probe, rule, &options)?
    };
    let a = cosine_alignment(&estimate, &exact_est)?;
    Ok(AlignmentPoint {
        step,
        mean_cosine: a.mean,
        per_layer: a.per_layer,
        loss: exact.stats.mean_loss(),
    })
}

struct AlignmentProbe<'a> {
    probe: &'a SequenceBatch,
    rule: RuleKind,
    every: usize,
    curve: AlignmentCurve,
}

impl TrainObserver for AlignmentProbe<'_> {
    fn on_update(&mut self, step: usize, net: &Network) -> Result<()> {
        if step.is_multiple_of(self.every) {
            self.curve.points.push(measure_alignment(net, self.probe, self.rule, step)?);
        }
        Ok(())
    }
}

/// Held-out probe batch: drawn from its own seed stream, never trained on.
pub fn probe_batch(cfg: &RunConfig) -> Result<SequenceBatch> {
    let task = CopyTaskConfig {
        num_samples: cfg.align.probe_size,
        seed: derive_seed(&[cfg.seed, PROBE_STREAM]),
        ..cfg.task.clone()
    };
    let idx: Vec<usize> = (0..task.num_samples).collect();
    Ok(CopyDataset::generate(&task)?.batch(&idx))
}

const PROBE_STREAM: u64 = 4;

/// Trains one configuration with its own rule and measures alignment with
/// BPTT every `cfg.align.every` updates (and before the first update).
pub fn alignment_run(cfg: &RunConfig) -> Result<(AlignmentCurve, TrainOutcome)> {
    let probe = probe_batch(cfg)?;
    let mut obs = AlignmentProbe {
        probe: &probe,
        rule: cfg.rule,
        every: cfg.align.every,
        curve: AlignmentCurve::default(),
    };
    let outcome = train(cfg, &mut obs)?;
    Ok((obs.curve, outcome))
}

/// One grid cell of an alignment sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentCell {
    pub depth: usize,
    pub lambda_min: f64,
    pub curve: AlignmentCurve,
    pub final_train_loss: Option<f64>,
}

/// Grid of `depths x lambda_min` cells; an absent axis keeps the base value.
pub fn alignment_grid(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    let a = &cfg.align;
    if a.depths.is_none() && a.lambda_min.is_none() {
        return Err(Error::InvalidModel("alignment grid is empty: set align.depths and/or align.lambda_min".into()));
    }
    let depths = a.depths.clone().unwrap_or_else(|| vec![cfg.model.num_layers]);
    let lmins = a.lambda_min.clone().unwrap_or_else(|| vec![cfg.model.r_min]);
    if depths.is_empty() || lmins.is_empty() {
        return Err(Error::InvalidModel("alignment grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(depths.len() * lmins.len());
    for &d in &depths {
        for &l in &lmins {
            let mut c = cfg.clone();
            c.model.num_layers = d;
            c.model.r_min = l;
            c.resolve()?;
            cells.push(c);
        }
    }
    Ok(cells)
}

pub fn alignment_sweep(cfg: &RunConfig) -> Result<Vec<AlignmentCell>> {
    alignment_grid(cfg)?
        .iter()
        .map(|c| {
            let (curve, outcome) = alignment_run(c)?;
            Ok(AlignmentCell {
                depth: c.model.num_layers,
                lambda_min: c.model.r_min,
                curve,
                final_train_loss: outcome.final_loss(),
            })
        })
        .collect()
}
