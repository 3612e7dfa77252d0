//! Copy-task training loop.
//!
//! Everything random is keyed by the run seed: the dataset, the parameter
//! init, the per-epoch shuffle and the per-update dropout masks. Two runs
//! of the same config are therefore bit-identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::learning::{run_pass, GradientEstimate, GradientOptions, OnlineLearner, PassStats, RuleKind};
use crate::network::{derive_seed, DropoutKey, Network};
use crate::optim::{adamw_step, lr_at, OptState};
use crate::tasks::{CopyDataset, SequenceBatch};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer updates applied so far.
    pub step: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Rate used by the last update of the epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

/// Hooks into the loop. Observers see parameters read-only and cannot
/// influence the trajectory.
pub trait TrainObserver {
    /// Called once before training (`step = 0`) and after every update.
    fn on_update(&mut self, _step: usize, _net: &Network) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub epochs: Vec<EpochMetrics>,
    /// Set when a non-finite loss or parameter stopped the run.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.train_loss)
    }
}

pub fn init_network(cfg: &RunConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_INIT]));
    Network::init(&cfg.model, &mut rng)
}

fn epoch_order(cfg: &RunConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.task.num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, STREAM_SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    net: Network,
    opt: OptState,
    step: usize,
    lr: f64,
}

impl Loop<'_> {
    fn apply(&mut self, mut grads: Network, norm: usize, observer: &mut dyn TrainObserver) -> Result<()> {
        grads.scale(1.0 / norm as f64);
        let est = GradientEstimate::from_network(&grads, self.cfg.rule, 0, 0);
        self.lr = lr_at(&self.cfg.optim, self.step)?;
        adamw_step(&mut self.net, &est, &mut self.opt, &self.cfg.optim, self.step)?;
        self.step += 1;
        observer.on_update(self.step, &self.net)
    }

    /// One update per sequence batch.
    fn whole_sequence(&mut self, batch: &SequenceBatch, options: &GradientOptions, obs: &mut dyn TrainObserver) -> Result<PassStats> {
        let out = run_pass(&self.net, batch, self.cfg.rule, options)?;
        if out.stats.loss_sum.is_finite() {
            self.apply(out.grads, batch.batch * batch.steps, obs)?;
        }
        Ok(out.stats)
    }

    /// Updates every `k` timesteps while the sequences keep streaming.
    fn chunked(&mut self, batch: &SequenceBatch, options: &GradientOptions, k: usize, obs: &mut dyn TrainObserver) -> Result<PassStats> {
        let mut learners = (0..batch.batch)
            .map(|_| OnlineLearner::new(&self.net, self.cfg.rule, options))
            .collect::<Result<Vec<_>>>()?;
        let keys: Vec<Option<DropoutKey>> = (0..batch.batch)
            .map(|s| options.dropout_seed.map(|d| DropoutKey(derive_seed(&[d, s as u64]))))
            .collect();
        let mut stats = PassStats::default();
        let mut start = 0;
        while start < batch.steps {
            let end = (start + k).min(batch.steps);
            let net = &self.net;
            let per: Vec<(Network, PassStats)> = learners
                .par_iter_mut()
                .zip(&keys)
                .enumerate()
                .map(|(s, (learner, key))| {
                    for t in start..end {
                        learner.step(net, batch.input(s, t), batch.target(s, t), batch.masked(s, t), *key)?;
                    }
                    Ok((learner.take_gradient(net), learner.take_stats()))
                })
                .collect::<Result<_>>()?;
            let mut grads = self.net.zeros_like();
            let mut chunk = PassStats::default();
            for (g, s) in &per {
                grads.add_assign(g);
                chunk.merge(s);
            }
            stats.merge(&chunk);
            if !chunk.loss_sum.is_finite() {
                return Ok(stats);
            }
            self.apply(grads, batch.batch * (end - start), obs)?;
            start = end;
        }
        Ok(stats)
    }
}

/// Trains from a fresh initialization.
pub fn train(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let net = init_network(cfg)?;
    train_from(cfg, net, observer)
}

pub fn train_from(cfg: &RunConfig, net: Network, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let dataset = CopyDataset::generate(&cfg.task)?;
    let started = std::time::Instant::now();
    let mut lp = Loop {
        cfg,
        opt: OptState::new(&net),
        net,
        step: 0,
        lr: 0.0,
    };
    observer.on_update(0, &lp.net)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut diverged = false;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg, epoch);
        let mut stats = PassStats::default();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = dataset.batch(idx);
            let global = (epoch * cfg.batches_per_epoch() + b) as u64;
            let options = GradientOptions {
                dropout_seed: (cfg.model.dropout > 0.0).then(|| derive_seed(&[cfg.seed, STREAM_DROPOUT, global])),
                ..Default::default()
            };
            let s = match (cfg.update_every, cfg.rule) {
                (0, _) | (_, RuleKind::Bptt) => lp.whole_sequence(&batch, &options, observer)?,
                (k, _) => lp.chunked(&batch, &options, k, observer)?,
            };
            stats.merge(&s);
            if !s.loss_sum.is_finite() || !lp.net.all_finite() {
                diverged = true;
                break;
            }
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            step: lp.step,
            train_loss: stats.mean_loss(),
            train_accuracy: stats.accuracy(),
            lr: lp.lr,
            wall_seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        observer.on_epoch(&metrics)?;
        epochs.push(metrics);
        if diverged {
            break;
        }
    }
    Ok(TrainOutcome {
        net: lp.net,
        epochs,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rule: &str, extra: &str) -> RunConfig {
        let text = format!(
            "[task]\npattern_len=2\nbits=2\npadding=1\nnum_samples=12\n[model]\nnum_layers=2\nstate_size=4\nmodel_size=4\n[optim]\nbase_lr=0.01\n[run]\nrule={rule}\nepochs=2\nbatch_size=5\n{extra}"
        );
        RunConfig::parse(&text, "tiny").unwrap()
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let cfg = tiny("online", "");
        let a = train(&cfg, &mut ()).unwrap();
        let b = train(&cfg, &mut ()).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.net, b.net);
        assert_eq!(a.epochs.len(), 2);
        assert_eq!(a.epochs[1].step, 6);
    }

    #[test]
    fn every_rule_trains_finitely() {
        for rule in ["online", "spatial", "truncated", "bptt"] {
            let out = train(&tiny(rule, ""), &mut ()).unwrap();
            assert!(!out.diverged, "{rule}");
            assert!(out.epochs.iter().all(|m| m.train_loss.is_finite()), "{rule}");
        }
    }

    #[test]
    fn chunked_updates_count_steps() {
        // T = 2*2 + 1 + 1 = 6, update every 4 -> 2 updates per batch, 3 batches, 2 epochs
        let out = train(&tiny("online", "update_every=4\n"), &mut ()).unwrap();
        assert_eq!(out.epochs[1].step, 12);
    }

    #[test]
    fn large_chunk_equals_whole_sequence() {
        let a = train(&tiny("online", ""), &mut ()).unwrap();
        let b = train(&tiny("online", "update_every=100\n"), &mut ()).unwrap();
        assert_eq!(a.net, b.net);
    }

    struct Recorder(Vec<usize>);

    impl TrainObserver for Recorder {
        fn on_update(&mut self, step: usize, _net: &Network) -> Result<()> {
            self.0.push(step);
            Ok(())
        }
    }

    #[test]
    fn observer_sees_every_update_without_changing_the_run() {
        let cfg = tiny("online", "");
        let mut rec = Recorder(Vec::new());
        let watched = train(&cfg, &mut rec).unwrap();
        assert_eq!(rec.0, (0..=6).collect::<Vec<_>>());
        assert_eq!(watched.net, train(&cfg, &mut ()).unwrap().net);
    }

    #[test]
    fn nan_parameters_stop_the_run() {
        let cfg = tiny("online", "");
        let mut net = init_network(&cfg).unwrap();
        net.decoder.bias[0] = f64::NAN;
        let out = train_from(&cfg, net, &mut ()).unwrap();
        assert!(out.diverged);
        assert_eq!(out.epochs.len(), 1);
        assert!(out.epochs[0].train_loss.is_nan());
    }
}
