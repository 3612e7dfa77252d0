//! Checkpoints: a plain-text manifest plus raw little-endian `f64` data.
//!
//! ```text
//! lru-online checkpoint 1
//! model num_layers=2 state_size=8 model_size=8 input_dim=5 output_dim=3 dropout=0.1 r_min=0 r_max=1
//! tensor encoder.weight f64 8 5
//! tensor blocks.0.lru.b f64 8 8 2
//! ...
//! ```
//!
//! The data file holds the tensors back to back in manifest order; complex
//! tensors are stored as interleaved `(re, im)` pairs (trailing dim `2`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Error, Result};
use crate::network::{ModelConfig, Network};

pub const MANIFEST_FILE: &str = "checkpoint.manifest";
pub const DATA_FILE: &str = "checkpoint.bin";
const HEADER: &str = "lru-online checkpoint 1";

pub fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(DATA_FILE))
}

pub fn manifest(net: &Network) -> String {
    let c = &net.config;
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(
        out,
        "model num_layers={} state_size={} model_size={} input_dim={} output_dim={} dropout={:?} r_min={:?} r_max={:?}",
        c.num_layers, c.state_size, c.model_size, c.input_dim, c.output_dim, c.dropout, c.r_min, c.r_max
    )
    .unwrap();
    for spec in net.layout() {
        let dims: Vec<String> = spec.shape.iter().map(usize::to_string).collect();
        writeln!(out, "tensor {} f64 {}", spec.name, dims.join(" ")).unwrap();
    }
    out
}

pub fn save(net: &Network, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (m, d) = paths(dir);
    std::fs::write(&m, manifest(net)).map_err(io_err(&m))?;
    let bytes: Vec<u8> = net.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&d, bytes).map_err(io_err(&d))
}

fn parse_model(line: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig {
        num_layers: 0,
        state_size: 0,
        model_size: 0,
        input_dim: 0,
        output_dim: 0,
        dropout: 0.0,
        r_min: 0.0,
        r_max: 1.0,
    };
    let bad = |m: String| Error::Checkpoint(m);
    for kv in line.split_whitespace().skip(1) {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed field '{kv}'")))?;
        let int = || v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
        let float = || v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
        match k {
            "num_layers" => cfg.num_layers = int()?,
            "state_size" => cfg.state_size = int()?,
            "model_size" => cfg.model_size = int()?,
            "input_dim" => cfg.input_dim = int()?,
            "output_dim" => cfg.output_dim = int()?,
            "dropout" => cfg.dropout = float()?,
            "r_min" => cfg.r_min = float()?,
            "r_max" => cfg.r_max = float()?,
            _ => return Err(bad(format!("unknown model field '{k}'"))),
        }
    }
    Ok(cfg)
}

pub fn load(dir: &Path) -> Result<Network> {
    let (m, d) = paths(dir);
    let text = std::fs::read_to_string(&m).map_err(io_err(&m))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::Checkpoint("unrecognized manifest header".into()));
    }
    let model = lines
        .next()
        .filter(|l| l.starts_with("model "))
        .ok_or_else(|| Error::Checkpoint("missing model line".into()))?;
    let mut net = Network::zeros(&parse_model(model)?)?;
    let expected = net.layout();
    let listed: Vec<&str> = lines.filter(|l| !l.trim().is_empty()).collect();
    if listed.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            listed.len(),
            expected.len()
        )));
    }
    for (line, spec) in listed.iter().zip(&expected) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let shape: Vec<usize> = fields.iter().skip(3).filter_map(|s| s.parse().ok()).collect();
        if fields.len() < 3 || fields[0] != "tensor" || fields[1] != spec.name || fields[2] != "f64" || shape != spec.shape {
            return Err(Error::Checkpoint(format!("unexpected manifest entry '{line}', wanted {}", spec.name)));
        }
    }
    let raw = std::fs::read(&d).map_err(io_err(&d))?;
    if raw.len() != 8 * net.param_count() {
        return Err(Error::Checkpoint(format!(
            "data file has {} bytes, manifest needs {}",
            raw.len(),
            8 * net.param_count()
        )));
    }
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    net.load_flat(&flat)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(layers: usize, n: usize, h: usize, dropout: f64) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            state_size: n,
            model_size: h,
            input_dim: 4,
            output_dim: 3,
            dropout,
            r_min: 0.25,
            r_max: 0.75,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trips_bit_exactly(layers in 1usize..4, n in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
            let net = Network::init(&config(layers, n, h, 0.1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save(&net, dir.path()).unwrap();
            let back = load(dir.path()).unwrap();
            let a: Vec<u64> = net.to_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.to_flat().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.config, net.config);
        }
    }

    #[test]
    fn manifest_lists_shapes() {
        let net = Network::zeros(&config(1, 2, 3, 0.0)).unwrap();
        let m = manifest(&net);
        assert!(m.contains("tensor blocks.0.lru.b f64 2 3 2"));
        assert!(m.contains("tensor decoder.weight f64 3 3"));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let net = Network::zeros(&config(1, 2, 3, 0.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&net, dir.path()).unwrap();
        let (_, d) = paths(dir.path());
        let raw = std::fs::read(&d).unwrap();
        std::fs::write(&d, &raw[..raw.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
