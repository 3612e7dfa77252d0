//! Copy task: show a sequence of random bit patterns, wait, cue, recall.
//!
//! Layout of one sample with `P = pattern_len`, `K = bits`, `G = padding`
//! (steps are 1-based, `T = 2P + G + 1`):
//!
//! | steps              | input channels                          | target / mask   |
//! |--------------------|-----------------------------------------|-----------------|
//! | 1 ..= P            | pattern bits in `0..K`, channel `K` = 1 | 0 / off         |
//! | P+1 ..= P+G        | all zero                                | 0 / off         |
//! | P+G+1              | cue channel `K+1` = 1                   | 0 / off         |
//! | P+G+2 ..= T        | all zero                                | pattern / on    |

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::network::derive_seed;
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyTaskConfig {
    pub pattern_len: usize,
    pub bits: usize,
    pub padding: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for CopyTaskConfig {
    fn default() -> Self {
        Self {
            pattern_len: 20,
            bits: 7,
            padding: 7,
            num_samples: 20_000,
            seed: 0,
        }
    }
}

impl CopyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pattern_len == 0 || self.bits == 0 {
            return Err(Error::InvalidModel("copy task needs pattern_len >= 1 and bits >= 1".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        2 * self.pattern_len + self.padding + 1
    }

    pub fn input_dim(&self) -> usize {
        self.bits + 2
    }

    pub fn output_dim(&self) -> usize {
        self.bits
    }
}

/// Dense `[batch, steps, dim]` tensors for a batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub steps: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

pub type CopyTaskBatch = SequenceBatch;

impl SequenceBatch {
    pub fn zeros(batch: usize, steps: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            batch,
            steps,
            input_dim,
            output_dim,
            inputs: vec![0.0; batch * steps * input_dim],
            targets: vec![0.0; batch * steps * output_dim],
            mask: vec![false; batch * steps],
        }
    }

    pub fn input(&self, sample: usize, t: usize) -> &[f64] {
        let k = (sample * self.steps + t) * self.input_dim;
        &self.inputs[k..k + self.input_dim]
    }

    pub fn target(&self, sample: usize, t: usize) -> &[f64] {
        let k = (sample * self.steps + t) * self.output_dim;
        &self.targets[k..k + self.output_dim]
    }

    pub fn masked(&self, sample: usize, t: usize) -> bool {
        self.mask[sample * self.steps + t]
    }

    pub fn masked_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Batch made of the selected samples, in the given order.
    pub fn select(&self, samples: &[usize]) -> SequenceBatch {
        let mut out = SequenceBatch::zeros(samples.len(), self.steps, self.input_dim, self.output_dim);
        let (si, so) = (self.steps * self.input_dim, self.steps * self.output_dim);
        for (k, &s) in samples.iter().enumerate() {
            out.inputs[k * si..(k + 1) * si].copy_from_slice(&self.inputs[s * si..(s + 1) * si]);
            out.targets[k * so..(k + 1) * so].copy_from_slice(&self.targets[s * so..(s + 1) * so]);
            out.mask[k * self.steps..(k + 1) * self.steps]
                .copy_from_slice(&self.mask[s * self.steps..(s + 1) * self.steps]);
        }
        out
    }
}

fn write_sample(cfg: &CopyTaskConfig, batch: &mut SequenceBatch, sample: usize, pattern: &[bool]) {
    let (p, k) = (cfg.pattern_len, cfg.bits);
    let recall_start = p + cfg.padding + 1;
    for t in 0..p {
        let base = (sample * batch.steps + t) * batch.input_dim;
        for b in 0..k {
            batch.inputs[base + b] = if pattern[t * k + b] { 1.0 } else { 0.0 };
        }
        batch.inputs[base + k] = 1.0;
    }
    let cue = (sample * batch.steps + p + cfg.padding) * batch.input_dim;
    batch.inputs[cue + k + 1] = 1.0;
    for t in 0..p {
        let step = recall_start + t;
        batch.mask[sample * batch.steps + step] = true;
        let base = (sample * batch.steps + step) * batch.output_dim;
        for b in 0..k {
            batch.targets[base + b] = if pattern[t * k + b] { 1.0 } else { 0.0 };
        }
    }
}

fn draw_pattern<R: Rng + ?Sized>(cfg: &CopyTaskConfig, rng: &mut R) -> Vec<bool> {
    (0..cfg.pattern_len * cfg.bits).map(|_| rng.random::<bool>()).collect()
}

pub fn generate_copy_batch<R: Rng + ?Sized>(cfg: &CopyTaskConfig, rng: &mut R, batch_size: usize) -> CopyTaskBatch {
    let mut batch = SequenceBatch::zeros(batch_size, cfg.seq_len(), cfg.input_dim(), cfg.output_dim());
    for s in 0..batch_size {
        let pattern = draw_pattern(cfg, rng);
        write_sample(cfg, &mut batch, s, &pattern);
    }
    batch
}

/// Fixed training set; sample `i` depends only on `(cfg, cfg.seed, i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyDataset {
    pub config: CopyTaskConfig,
    patterns: Vec<Vec<bool>>,
}

impl CopyDataset {
    pub fn generate(cfg: &CopyTaskConfig) -> Result<Self> {
        cfg.validate()?;
        let patterns = (0..cfg.num_samples)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, i as u64]));
                draw_pattern(cfg, &mut rng)
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            patterns,
        })
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> CopyTaskBatch {
        let cfg = &self.config;
        let mut batch = SequenceBatch::zeros(indices.len(), cfg.seq_len(), cfg.input_dim(), cfg.output_dim());
        for (s, &i) in indices.iter().enumerate() {
            write_sample(cfg, &mut batch, s, &self.patterns[i]);
        }
        batch
    }

    const MAGIC: &'static [u8; 8] = b"LRUCOPY1";

    /// Header (magic, pattern_len, bits, padding, num_samples, seed as LE u64)
    /// followed by each sample's bits packed LSB-first, padded to whole bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        for v in [cfg.pattern_len as u64, cfg.bits as u64, cfg.padding as u64, self.len() as u64, cfg.seed] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for pattern in &self.patterns {
            let mut bytes = vec![0u8; pattern.len().div_ceil(8)];
            for (k, &bit) in pattern.iter().enumerate() {
                if bit {
                    bytes[k / 8] |= 1 << (k % 8);
                }
            }
            out.extend_from_slice(&bytes);
        }
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(io_err(path))?;
        if raw.len() < 48 || &raw[..8] != Self::MAGIC {
            return Err(Error::Dataset("bad header".into()));
        }
        let word = |k: usize| u64::from_le_bytes(raw[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
        let cfg = CopyTaskConfig {
            pattern_len: word(0) as usize,
            bits: word(1) as usize,
            padding: word(2) as usize,
            num_samples: word(3) as usize,
            seed: word(4),
        };
        cfg.validate()?;
        let per = (cfg.pattern_len * cfg.bits).div_ceil(8);
        let body = &raw[48..];
        if body.len() != per * cfg.num_samples {
            return Err(Error::Dataset(format!(
                "expected {} payload bytes, found {}",
                per * cfg.num_samples,
                body.len()
            )));
        }
        let patterns = body
            .chunks_exact(per)
            .map(|bytes| (0..cfg.pattern_len * cfg.bits).map(|k| bytes[k / 8] >> (k % 8) & 1 == 1).collect())
            .collect();
        Ok(Self { config: cfg, patterns })
    }
}

/// Per-step loss used by the learning rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// Mean over outputs of sigmoid binary cross-entropy.
    #[default]
    BinaryCrossEntropy,
    /// Mean over outputs of `(y - target)^2 / 2`.
    SquaredError,
}

impl Objective {
    /// Loss of one step; writes `dL/dlogits` into `grad`.
    pub fn loss_and_grad(self, logits: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        let k = logits.len() as f64;
        let mut loss = 0.0;
        match self {
            Objective::BinaryCrossEntropy => {
                for ((&z, &y), g) in logits.iter().zip(target).zip(grad.iter_mut()) {
                    loss += softplus(z) - y * z;
                    *g = (sigmoid(z) - y) / k;
                }
            }
            Objective::SquaredError => {
                for ((&z, &y), g) in logits.iter().zip(target).zip(grad.iter_mut()) {
                    loss += 0.5 * (z - y) * (z - y);
                    *g = (z - y) / k;
                }
            }
        }
        loss / k
    }

    pub fn loss(self, logits: &[f64], target: &[f64]) -> f64 {
        let mut scratch = vec![0.0; logits.len()];
        self.loss_and_grad(logits, target, &mut scratch)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean over bits of sigmoid cross-entropy when `masked`, else 0.
pub fn step_loss(logits: &[f64], target: &[f64], masked: bool) -> f64 {
    if masked {
        Objective::BinaryCrossEntropy.loss(logits, target)
    } else {
        0.0
    }
}

/// Fraction of masked bits where `logit > 0` agrees with the target bit.
///
/// `logits` and `targets` are `[steps, bits]`, `mask` is `[steps]`. A zero
/// logit predicts 0. Returns `None` when nothing is masked.
pub fn accuracy(logits: &[f64], targets: &[f64], mask: &[bool]) -> Option<f64> {
    let bits = logits.len() / mask.len().max(1);
    let mut hit = 0usize;
    let mut total = 0usize;
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for b in 0..bits {
            let pred = logits[t * bits + b] > 0.0;
            let truth = targets[t * bits + b] > 0.5;
            hit += usize::from(pred == truth);
            total += 1;
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: usize, k: usize, g: usize) -> CopyTaskConfig {
        CopyTaskConfig {
            pattern_len: p,
            bits: k,
            padding: g,
            num_samples: 8,
            seed: 1,
        }
    }

    #[test]
    fn paper_layout_dimensions() {
        let c = cfg(20, 7, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = generate_copy_batch(&c, &mut rng, 3);
        assert_eq!(b.steps, 48);
        assert_eq!(b.input_dim, 9);
        for s in 0..3 {
            assert_eq!((0..48).filter(|&t| b.masked(s, t)).count(), 20);
        }
    }

    #[test]
    fn minimal_instance_recalls_first_bit() {
        let c = cfg(1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = generate_copy_batch(&c, &mut rng, 16);
        assert_eq!(b.steps, 3);
        for s in 0..16 {
            assert_eq!(b.input(s, 0)[1], 1.0); // presentation flag
            assert_eq!(b.input(s, 1), &[0.0, 0.0, 1.0]); // cue
            assert_eq!(b.input(s, 2), &[0.0, 0.0, 0.0]);
            assert!(!b.masked(s, 0) && !b.masked(s, 1) && b.masked(s, 2));
            assert_eq!(b.target(s, 2)[0], b.input(s, 0)[0]);
        }
    }

    #[test]
    fn targets_follow_pattern_order() {
        let c = cfg(4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = generate_copy_batch(&c, &mut rng, 4);
        for s in 0..4 {
            for t in 0..4 {
                assert_eq!(&b.input(s, t)[..3], b.target(s, t + 4 + 2 + 1));
            }
            for t in 0..b.steps {
                if !b.masked(s, t) {
                    assert!(b.target(s, t).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let c = cfg(5, 3, 3);
        let a = generate_copy_batch(&c, &mut ChaCha8Rng::seed_from_u64(42), 10);
        let b = generate_copy_batch(&c, &mut ChaCha8Rng::seed_from_u64(42), 10);
        assert_eq!(a, b);
        let d1 = CopyDataset::generate(&c).unwrap();
        let d2 = CopyDataset::generate(&c).unwrap();
        assert_eq!(d1.batch(&[3, 1, 7]), d2.batch(&[3, 1, 7]));
        assert_eq!(d1.batch(&[3, 1]), d1.batch(&[0, 1, 2, 3]).select(&[3, 1]));
    }

    #[test]
    fn bit_frequency_is_one_half() {
        let c = cfg(1, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let b = generate_copy_batch(&c, &mut rng, 100_000);
        let ones = (0..b.batch).filter(|&s| b.input(s, 0)[0] == 1.0).count();
        let freq = ones as f64 / 1e5;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn step_loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((step_loss(&[0.0; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0], true) - ln2).abs() < 1e-15);
        assert!(step_loss(&[50.0; 3], &[1.0; 3], true) < 1e-20);
        assert_eq!(step_loss(&[3.0; 3], &[0.0; 3], false), 0.0);
    }

    #[test]
    fn step_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-30.0..30.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
            let direct: f64 = z
                .iter()
                .zip(&y)
                .map(|(&z, &y)| {
                    let p = 1.0 / (1.0 + (-z).exp());
                    let q = 1.0 / (1.0 + z.exp());
                    -(y * p.ln() + (1.0 - y) * q.ln())
                })
                .sum::<f64>()
                / 5.0;
            let ours = step_loss(&z, &y, true);
            assert!((ours - direct).abs() <= 1e-12 * direct.abs().max(1.0), "{ours} {direct}");
        }
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let z = [0.3, -2.0, 4.0];
        let y = [1.0, 0.0, 0.0];
        let mut g = [0.0; 3];
        Objective::BinaryCrossEntropy.loss_and_grad(&z, &y, &mut g);
        for k in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[k] += 1e-6;
            zm[k] -= 1e-6;
            let fd = (Objective::BinaryCrossEntropy.loss(&zp, &y) - Objective::BinaryCrossEntropy.loss(&zm, &y)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_examples() {
        let targets = [1.0, 0.0, 0.0, 1.0];
        let mask = [true, true];
        assert_eq!(accuracy(&[3.0, -1.0, -2.0, 0.5], &targets, &mask), Some(1.0));
        assert_eq!(accuracy(&[-3.0, 1.0, 2.0, -0.5], &targets, &mask), Some(0.0));
        // zero logits predict 0
        assert_eq!(accuracy(&[0.0; 4], &targets, &mask), Some(0.5));
        assert_eq!(accuracy(&[0.0; 4], &targets, &[false, false]), None);
    }

    #[test]
    fn zero_logit_accuracy_is_fraction_of_zero_bits() {
        let c = cfg(5, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = generate_copy_batch(&c, &mut rng, 2000);
        let logits = vec![0.0; b.targets.len()];
        let acc = accuracy(&logits, &b.targets, &b.mask).unwrap();
        assert!((acc - 0.5).abs() < 0.01, "{acc}");
    }

    #[test]
    fn dataset_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("copy.bin");
        let d = CopyDataset::generate(&cfg(5, 3, 3)).unwrap();
        d.save(&path).unwrap();
        assert_eq!(CopyDataset::load(&path).unwrap(), d);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(CopyDataset::load(&path), Err(Error::Dataset(_))));
    }
}
