//! Learning rules behind a single streaming interface.
//!
//! All online rules share one loop per timestep: advance `(h_t, e_t)`, read
//! the step loss, backpropagate it through depth only, and contract the
//! resulting `delta_t^l` with each layer's traces. They differ only in how
//! the traces carry history:
//!
//! | rule          | trace law                                   |
//! |---------------|---------------------------------------------|
//! | `OnlineTraces`| `e_t = lambda ⊙ e_{t-1} + i_t` (exact RTRL) |
//! | `Truncated1`  | `e_t = i_t + lambda ⊙ i_{t-1}`              |
//! | `Spatial`     | `e_t = i_t`                                 |
//!
//! where `i_t` is the instantaneous term `(h_{t-1}, B x_t, gamma x_t^T)`.
//! `Bptt` is the offline oracle: it stores the whole unrolled sequence and
//! runs a hand-written reverse pass.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lru::{chain_to_real_params, propagate_traces, LruCoeffs, RecurrentGrad, SensitivityState};
use crate::network::{
    backward_step_into, block_of, derive_seed, forward_step_into, BackwardScratch, DropoutKey, NetState, Network,
    StepCache,
};
use crate::numerics::{Complex, ComplexVector, ZERO};
use crate::tasks::{Objective, SequenceBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleKind {
    OnlineTraces,
    Spatial,
    Truncated1,
    /// Offline oracle; never streamed.
    Bptt,
}

impl RuleKind {
    pub const ALL: [RuleKind; 4] = [RuleKind::OnlineTraces, RuleKind::Spatial, RuleKind::Truncated1, RuleKind::Bptt];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::OnlineTraces => "online",
            RuleKind::Spatial => "spatial",
            RuleKind::Truncated1 => "truncated",
            RuleKind::Bptt => "bptt",
        }
    }

    pub fn is_online(self) -> bool {
        self != RuleKind::Bptt
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RuleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "online" | "onlinetraces" | "online_traces" | "ours" => Ok(RuleKind::OnlineTraces),
            "spatial" | "spat" => Ok(RuleKind::Spatial),
            "truncated" | "truncated1" | "trunc" => Ok(RuleKind::Truncated1),
            "bptt" | "bp" => Ok(RuleKind::Bptt),
            other => Err(format!("unknown rule '{other}' (expected online, spatial, truncated or bptt)")),
        }
    }
}

/// Named real gradients, one entry per parameter tensor in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub rule: RuleKind,
    pub seq_len: usize,
    pub batch_size: usize,
    pub entries: IndexMap<String, Vec<f64>>,
}

impl GradientEstimate {
    pub fn from_network(grads: &Network, rule: RuleKind, seq_len: usize, batch_size: usize) -> Self {
        let mut entries = IndexMap::new();
        grads.visit(|spec, t| {
            let mut v = Vec::with_capacity(t.real_len());
            t.extend_flat(&mut v);
            entries.insert(spec.name.clone(), v);
        });
        Self {
            rule,
            seq_len,
            batch_size,
            entries,
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.entries.values().flatten().copied().collect()
    }

    /// Concatenation of the selected entries.
    pub fn flat_of<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        names
            .into_iter()
            .flat_map(|n| self.entries.get(n).map(Vec::as_slice).unwrap_or(&[]))
            .copied()
            .collect()
    }

    pub fn num_layers(&self) -> usize {
        self.entries.keys().filter_map(|k| block_of(k)).max().map_or(0, |l| l + 1)
    }

    pub fn same_keys(&self, other: &GradientEstimate) -> bool {
        self.entries.len() == other.entries.len() && self.entries.keys().zip(other.entries.keys()).all(|(a, b)| a == b)
    }
}

/// Parameters whose online gradient is exact: everything in the last block's
/// LRU and GLU, and the decoder.
pub fn exact_online_params(est: &GradientEstimate) -> Vec<String> {
    let Some(last) = est.num_layers().checked_sub(1) else {
        return Vec::new();
    };
    let prefixes = [format!("blocks.{last}.lru."), format!("blocks.{last}.glu."), "decoder.".to_string()];
    est.entries
        .keys()
        .filter(|k| prefixes.iter().any(|p| k.starts_with(p.as_str())))
        .cloned()
        .collect()
}

/// Knobs shared by all rules.
#[derive(Clone, Debug, Default)]
pub struct GradientOptions {
    pub objective: Objective,
    /// Per-run dropout seed; sample `i` uses a key derived from `(seed, i)`.
    /// `None` runs in evaluation mode.
    pub dropout_seed: Option<u64>,
    /// Negative-control fixture: damages the `OnlineTraces` carry.
    #[doc(hidden)]
    pub corrupt_traces: bool,
}

impl GradientOptions {
    fn dropout_key(&self, sample: usize) -> Option<DropoutKey> {
        self.dropout_seed.map(|s| DropoutKey(derive_seed(&[s, sample as u64])))
    }
}

/// Loss and accuracy bookkeeping for one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PassStats {
    pub loss_sum: f64,
    pub masked_steps: usize,
    pub correct_bits: usize,
    pub total_bits: usize,
}

impl PassStats {
    pub fn merge(&mut self, o: &PassStats) {
        self.loss_sum += o.loss_sum;
        self.masked_steps += o.masked_steps;
        self.correct_bits += o.correct_bits;
        self.total_bits += o.total_bits;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.masked_steps == 0 {
            0.0
        } else {
            self.loss_sum / self.masked_steps as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total_bits == 0 {
            0.0
        } else {
            self.correct_bits as f64 / self.total_bits as f64
        }
    }

    fn record(&mut self, loss: f64, logits: &[f64], target: &[f64]) {
        self.loss_sum += loss;
        self.masked_steps += 1;
        for (z, y) in logits.iter().zip(target) {
            self.correct_bits += usize::from((*z > 0.0) == (*y > 0.5));
            self.total_bits += 1;
        }
    }
}

struct LayerStream {
    traces: SensitivityState,
    /// `Truncated1` only: previous instantaneous term.
    prev: Option<SensitivityState>,
    acc: RecurrentGrad,
}

/// Streaming learner for one sequence; holds only the current timestep.
pub struct OnlineLearner {
    rule: RuleKind,
    objective: Objective,
    corrupt: bool,
    state: NetState,
    layers: Vec<LayerStream>,
    grads: Network,
    cache: StepCache,
    scratch: BackwardScratch,
    dl_dy: Vec<f64>,
    stats: PassStats,
    peak_aux: usize,
}

impl OnlineLearner {
    pub fn new(net: &Network, rule: RuleKind, options: &GradientOptions) -> Result<Self> {
        if !rule.is_online() {
            return Err(Error::OfflineRule(rule.name()));
        }
        let (n, h) = (net.config.state_size, net.config.model_size);
        let layers = (0..net.num_layers())
            .map(|_| LayerStream {
                traces: SensitivityState::zeros(n, h),
                prev: (rule == RuleKind::Truncated1).then(|| SensitivityState::zeros(n, h)),
                acc: RecurrentGrad::zeros(n, h),
            })
            .collect();
        Ok(Self {
            rule,
            objective: options.objective,
            corrupt: options.corrupt_traces,
            state: net.initial_state(),
            layers,
            grads: net.zeros_like(),
            cache: StepCache::new(&net.config),
            scratch: BackwardScratch::new(&net.config),
            dl_dy: vec![0.0; net.config.output_dim],
            stats: PassStats::default(),
            peak_aux: 0,
        })
    }

    pub fn rule(&self) -> RuleKind {
        self.rule
    }

    pub fn position(&self) -> u64 {
        self.state.position()
    }

    pub fn stats(&self) -> PassStats {
        self.stats
    }

    /// Complex trace entries of every layer.
    pub fn trace_entries(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.traces.entry_count()).collect()
    }

    /// Largest number of auxiliary real scalars held at once (state, traces,
    /// one-step cache); excludes parameters, gradient accumulators and the
    /// input stream.
    pub fn peak_aux_entries(&self) -> usize {
        self.peak_aux
    }

    fn aux_entries(&self) -> usize {
        let traces: usize = self
            .layers
            .iter()
            .map(|l| l.traces.entry_count() + l.prev.as_ref().map_or(0, |p| p.entry_count()))
            .sum();
        2 * (self.state.entry_count() + traces) + self.cache.entry_count() + 2 * self.scratch.deltas.iter().map(Vec::len).sum::<usize>()
    }

    /// Consumes one timestep. Returns the step loss (0 when not masked).
    pub fn step(
        &mut self,
        net: &Network,
        x: &[f64],
        target: &[f64],
        masked: bool,
        dropout: Option<DropoutKey>,
    ) -> Result<f64> {
        if x.len() != net.config.input_dim || target.len() != net.config.output_dim {
            return Err(Error::Dimension {
                context: "OnlineLearner::step",
                expected: net.config.input_dim,
                actual: x.len(),
            });
        }
        let coeffs = net.coeffs();
        Ok(self.step_with(net, &coeffs, x, target, masked, dropout))
    }

    pub(crate) fn step_with(
        &mut self,
        net: &Network,
        coeffs: &[LruCoeffs],
        x: &[f64],
        target: &[f64],
        masked: bool,
        dropout: Option<DropoutKey>,
    ) -> f64 {
        forward_step_into(net, coeffs, &mut self.state, x, dropout, &mut self.cache);

        for ((stream, lc), co) in self.layers.iter_mut().zip(&self.cache.layers).zip(coeffs) {
            match self.rule {
                RuleKind::OnlineTraces if self.corrupt => {
                    let mut damaged = co.clone();
                    damaged.lambda.iter_mut().for_each(|l| *l *= 0.5);
                    propagate_traces(&damaged, &lc.h_prev, &lc.bx, &lc.lru_in, &mut stream.traces);
                }
                RuleKind::OnlineTraces => propagate_traces(co, &lc.h_prev, &lc.bx, &lc.lru_in, &mut stream.traces),
                RuleKind::Spatial => instantaneous_traces(co, &lc.h_prev, &lc.bx, &lc.lru_in, &mut stream.traces),
                RuleKind::Truncated1 => {
                    let prev = stream.prev.as_mut().expect("truncated rule keeps previous term");
                    one_step_traces(co, &lc.h_prev, &lc.bx, &lc.lru_in, prev, &mut stream.traces);
                }
                RuleKind::Bptt => unreachable!("rejected in OnlineLearner::new"),
            }
        }
        self.peak_aux = self.peak_aux.max(self.aux_entries());

        if !masked {
            return 0.0;
        }
        let loss = self.objective.loss_and_grad(&self.cache.logits, target, &mut self.dl_dy);
        self.stats.record(loss, &self.cache.logits, target);
        backward_step_into(net, coeffs, &self.cache, &self.dl_dy, None, &mut self.grads, &mut self.scratch);
        for (stream, delta) in self.layers.iter_mut().zip(&self.scratch.deltas) {
            stream.acc.accumulate(delta, &stream.traces);
        }
        loss
    }

    /// Real gradient accumulated since the last call; resets the accumulators
    /// but keeps the state and traces running.
    pub fn take_gradient(&mut self, net: &Network) -> Network {
        let mut out = std::mem::replace(&mut self.grads, net.zeros_like());
        for ((stream, gblock), block) in self.layers.iter_mut().zip(&mut out.blocks).zip(&net.blocks) {
            write_recurrent(&stream.acc, &block.lru, &mut gblock.lru);
            stream.acc.reset();
        }
        out
    }

    /// Clears the per-pass loss statistics.
    pub fn take_stats(&mut self) -> PassStats {
        std::mem::take(&mut self.stats)
    }
}

fn write_recurrent(acc: &RecurrentGrad, params: &crate::lru::LruParams, out: &mut crate::lru::LruParams) {
    let real = chain_to_real_params(acc, params);
    out.nu_log = real.nu_log;
    out.theta_log = real.theta_log;
    out.gamma_log = real.gamma_log;
    out.b = real.b;
}

/// `e = (h_prev, B x, gamma x^T)`: no carried history.
fn instantaneous_traces(co: &LruCoeffs, h_prev: &[Complex], bx: &[Complex], x: &[f64], traces: &mut SensitivityState) {
    traces.e_lambda.copy_from_slice(h_prev);
    traces.e_gamma.copy_from_slice(bx);
    for (i, &g) in co.gamma.iter().enumerate() {
        for (e, &xj) in traces.e_b.row_mut(i).iter_mut().zip(x) {
            *e = Complex::new(g * xj, 0.0);
        }
    }
}

/// `e = i_t + lambda ⊙ i_{t-1}`, then `prev <- i_t`.
fn one_step_traces(
    co: &LruCoeffs,
    h_prev: &[Complex],
    bx: &[Complex],
    x: &[f64],
    prev: &mut SensitivityState,
    traces: &mut SensitivityState,
) {
    for i in 0..co.lambda.len() {
        let l = co.lambda[i];
        let g = co.gamma[i];
        traces.e_lambda[i] = h_prev[i] + l * prev.e_lambda[i];
        prev.e_lambda[i] = h_prev[i];
        traces.e_gamma[i] = bx[i] + l * prev.e_gamma[i];
        prev.e_gamma[i] = bx[i];
        for ((e, p), &xj) in traces.e_b.row_mut(i).iter_mut().zip(prev.e_b.row_mut(i)).zip(x) {
            let inst = Complex::new(g * xj, 0.0);
            *e = inst + l * *p;
            *p = inst;
        }
    }
}

/// Gradient, statistics and memory footprint of one pass over a batch.
#[derive(Clone, Debug)]
pub struct PassOutcome {
    pub grads: Network,
    pub stats: PassStats,
    /// Largest per-sequence auxiliary footprint in real scalars.
    pub peak_aux_entries: usize,
}

fn run_online_sample(
    net: &Network,
    coeffs: &[LruCoeffs],
    batch: &SequenceBatch,
    sample: usize,
    rule: RuleKind,
    options: &GradientOptions,
) -> Result<(Network, PassStats, usize)> {
    let mut learner = OnlineLearner::new(net, rule, options)?;
    let key = options.dropout_key(sample);
    for t in 0..batch.steps {
        learner.step_with(net, coeffs, batch.input(sample, t), batch.target(sample, t), batch.masked(sample, t), key);
    }
    let peak = learner.peak_aux_entries();
    let stats = learner.take_stats();
    Ok((learner.take_gradient(net), stats, peak))
}

/// Runs any rule over the batch. Samples are processed concurrently and
/// reduced in sample order, so results are bit-reproducible.
pub fn run_pass(net: &Network, batch: &SequenceBatch, rule: RuleKind, options: &GradientOptions) -> Result<PassOutcome> {
    check_batch(net, batch)?;
    let coeffs = net.coeffs();
    let per_sample: Vec<(Network, PassStats, usize)> = (0..batch.batch)
        .into_par_iter()
        .map(|s| match rule {
            RuleKind::Bptt => Ok(run_bptt_sample(net, &coeffs, batch, s, options)),
            _ => run_online_sample(net, &coeffs, batch, s, rule, options),
        })
        .collect::<Result<_>>()?;
    let mut grads = net.zeros_like();
    let mut stats = PassStats::default();
    let mut peak = 0;
    for (g, s, p) in &per_sample {
        grads.add_assign(g);
        stats.merge(s);
        peak = peak.max(*p);
    }
    Ok(PassOutcome {
        grads,
        stats,
        peak_aux_entries: peak,
    })
}

fn check_batch(net: &Network, batch: &SequenceBatch) -> Result<()> {
    if batch.input_dim != net.config.input_dim {
        return Err(Error::Dimension {
            context: "batch input_dim",
            expected: net.config.input_dim,
            actual: batch.input_dim,
        });
    }
    if batch.output_dim != net.config.output_dim {
        return Err(Error::Dimension {
            context: "batch output_dim",
            expected: net.config.output_dim,
            actual: batch.output_dim,
        });
    }
    Ok(())
}

/// Gradient of the summed step losses under an online rule, in one forward sweep.
pub fn online_sequence_gradient(
    net: &Network,
    batch: &SequenceBatch,
    rule: RuleKind,
    options: &GradientOptions,
) -> Result<GradientEstimate> {
    if !rule.is_online() {
        return Err(Error::OfflineRule(rule.name()));
    }
    let out = run_pass(net, batch, rule, options)?;
    Ok(GradientEstimate::from_network(&out.grads, rule, batch.steps, batch.batch))
}

/// Exact gradient of the summed step losses by backpropagation through time.
pub fn bptt_gradient(net: &Network, batch: &SequenceBatch, options: &GradientOptions) -> Result<GradientEstimate> {
    let out = run_pass(net, batch, RuleKind::Bptt, options)?;
    Ok(GradientEstimate::from_network(&out.grads, RuleKind::Bptt, batch.steps, batch.batch))
}

fn run_bptt_sample(
    net: &Network,
    coeffs: &[LruCoeffs],
    batch: &SequenceBatch,
    sample: usize,
    options: &GradientOptions,
) -> (Network, PassStats, usize) {
    let key = options.dropout_key(sample);
    let out_dim = net.config.output_dim;
    let mut state = net.initial_state();
    let mut stats = PassStats::default();
    let mut caches: Vec<StepCache> = Vec::with_capacity(batch.steps);
    let mut errors: Vec<Vec<f64>> = Vec::with_capacity(batch.steps);
    let mut cache = StepCache::new(&net.config);
    for t in 0..batch.steps {
        forward_step_into(net, coeffs, &mut state, batch.input(sample, t), key, &mut cache);
        let mut dl = vec![0.0; out_dim];
        if batch.masked(sample, t) {
            let target = batch.target(sample, t);
            let loss = options.objective.loss_and_grad(&cache.logits, target, &mut dl);
            stats.record(loss, &cache.logits, target);
        }
        caches.push(cache.clone());
        errors.push(dl);
    }
    let stored = caches.iter().map(StepCache::entry_count).sum::<usize>() + errors.iter().map(Vec::len).sum::<usize>();

    let (n, h) = (net.config.state_size, net.config.model_size);
    let mut grads = net.zeros_like();
    let mut scratch = BackwardScratch::new(&net.config);
    let mut carry: Vec<ComplexVector> = vec![vec![ZERO; n]; net.num_layers()];
    let mut acc: Vec<RecurrentGrad> = (0..net.num_layers()).map(|_| RecurrentGrad::zeros(n, h)).collect();
    for t in (0..batch.steps).rev() {
        let cache = &caches[t];
        backward_step_into(net, coeffs, cache, &errors[t], Some(&carry), &mut grads, &mut scratch);
        for l in 0..net.num_layers() {
            let delta = &scratch.deltas[l];
            let lc = &cache.layers[l];
            let a = &mut acc[l];
            // h_t = lambda h_{t-1} + gamma B x_t, differentiated in place
            for i in 0..n {
                let d = delta[i];
                a.d_lambda[i] += d * lc.h_prev[i];
                a.d_gamma[i] += (d * lc.bx[i]).re;
                let dg = d * coeffs[l].gamma[i];
                for (g, &xj) in a.d_b.row_mut(i).iter_mut().zip(&lc.lru_in) {
                    *g += dg * xj;
                }
                carry[l][i] = coeffs[l].lambda[i] * d;
            }
        }
    }
    for ((a, gblock), block) in acc.iter().zip(&mut grads.blocks).zip(&net.blocks) {
        write_recurrent(a, &block.lru, &mut gblock.lru);
    }
    (grads, stats, 2 * stored)
}

/// Per-layer and mean cosine between two estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `None` where either gradient has zero norm in that layer.
    pub per_layer: Vec<Option<f64>>,
    /// Mean over the defined layers; `None` if no layer is defined.
    pub mean: Option<f64>,
}

impl Alignment {
    pub fn undefined_layers(&self) -> Vec<usize> {
        self.per_layer
            .iter()
            .enumerate()
            .filter_map(|(l, c)| c.is_none().then_some(l))
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine of the concatenated recurrent-parameter gradients
/// (`nu_log`, `theta_log`, `gamma_log`, `B`) per block, averaged over blocks.
/// Encoder and decoder never enter.
pub fn cosine_alignment(a: &GradientEstimate, b: &GradientEstimate) -> Result<Alignment> {
    if !a.same_keys(b) {
        return Err(Error::Dimension {
            context: "cosine_alignment key sets",
            expected: a.entries.len(),
            actual: b.entries.len(),
        });
    }
    let per_layer: Vec<Option<f64>> = (0..a.num_layers())
        .map(|l| {
            let names = crate::network::recurrent_param_names(l);
            let names = names.iter().map(String::as_str);
            cosine(&a.flat_of(names.clone()), &b.flat_of(names))
        })
        .collect();
    let defined: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(Alignment { per_layer, mean })
}

/// Loss of the batch under the current parameters (no gradients).
pub fn batch_loss(net: &Network, batch: &SequenceBatch, options: &GradientOptions) -> Result<PassStats> {
    check_batch(net, batch)?;
    let coeffs = net.coeffs();
    let per: Vec<PassStats> = (0..batch.batch)
        .into_par_iter()
        .map(|s| {
            let key = options.dropout_key(s);
            let mut state = net.initial_state();
            let mut cache = StepCache::new(&net.config);
            let mut stats = PassStats::default();
            for t in 0..batch.steps {
                forward_step_into(net, &coeffs, &mut state, batch.input(s, t), key, &mut cache);
                if batch.masked(s, t) {
                    let target = batch.target(s, t);
                    let loss = options.objective.loss(&cache.logits, target);
                    stats.record(loss, &cache.logits, target);
                }
            }
            stats
        })
        .collect();
    let mut total = PassStats::default();
    for s in &per {
        total.merge(s);
    }
    Ok(total)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest coordinate-wise relative error between two equal-length slices.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y, floor)).fold(0.0, f64::max)
}

/// `||a - b|| / ||b||`.
pub fn norm_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}
