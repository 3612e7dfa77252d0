#![allow(dead_code)]

use lru_online::network::{ModelConfig, Network};
use lru_online::numerics::Complex;
use lru_online::tasks::SequenceBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const INPUT: usize = 3;
pub const OUTPUT: usize = 2;

pub fn model(layers: usize, n: usize, h: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        state_size: n,
        model_size: h,
        input_dim: INPUT,
        output_dim: OUTPUT,
        dropout: 0.0,
        r_min: 0.3,
        r_max: 0.99,
    }
}

/// Initialized network with biases and norm parameters jittered away from
/// their init values so every parameter path is exercised.
pub fn random_net(cfg: &ModelConfig, seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(cfg, &mut rng).unwrap();
    let jitter = Normal::new(0.0, 0.1).unwrap();
    for v in net.encoder.bias.iter_mut().chain(net.decoder.bias.iter_mut()) {
        *v += jitter.sample(&mut rng);
    }
    for b in &mut net.blocks {
        for v in b.norm.scale.iter_mut().chain(b.norm.bias.iter_mut()).chain(b.glu.b1.iter_mut()).chain(b.glu.b2.iter_mut()) {
            *v += jitter.sample(&mut rng);
        }
    }
    net
}

/// Gaussian inputs, random bit targets, about half the steps masked (the
/// last step always is).
pub fn random_batch(seed: u64, batch: usize, steps: usize) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = SequenceBatch::zeros(batch, steps, INPUT, OUTPUT);
    for v in s.inputs.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    for v in s.targets.iter_mut() {
        *v = f64::from(u8::from(rng.random::<bool>()));
    }
    for m in s.mask.iter_mut() {
        *m = rng.random::<bool>();
    }
    for b in 0..batch {
        s.mask[b * steps + steps - 1] = true;
    }
    s
}

pub fn zero_lambda(net: &mut Network) {
    for b in &mut net.blocks {
        let n = b.lru.state_size();
        b.lru.set_lambda(&vec![Complex::new(0.0, 0.0); n]);
    }
}
