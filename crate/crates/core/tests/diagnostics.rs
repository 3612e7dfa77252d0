//! Cost accounting and alignment measurements.

mod common;

use common::*;
use lru_online::config::RunConfig;
use lru_online::diagnostics::{alignment_grid, cost_report, measure_alignment, probe_batch};
use lru_online::learning::RuleKind;
use lru_online::train::init_network;

#[test]
fn trace_storage_equals_recurrent_parameters() {
    for (l, n, h) in [(1, 4, 4), (2, 32, 32), (4, 64, 128)] {
        let net = random_net(&model(l, n, h), 0);
        let c = cost_report(&net);
        // complex entries, stored as two reals each
        assert_eq!(c.trace_entries, 2 * l * net.blocks[0].lru.recurrent_param_count());
        assert_eq!(c.state_entries, l * 2 * n);
    }
}

#[test]
fn online_learning_costs_at_most_three_forward_passes_of_the_recurrence() {
    for (n, h) in [(32, 32), (64, 128)] {
        let c = cost_report(&random_net(&model(2, n, h), 0));
        let r = c.flop_ratio();
        println!("N={n} H={h}: online/forward flop ratio {r:.3}");
        assert!(r > 1.0 && r <= 3.0, "{r}");
    }
}

#[test]
fn untrained_networks_are_positively_aligned_at_every_depth() {
    let base = RunConfig::parse(
        "[task]\npattern_len = 5\nbits = 3\npadding = 3\n[model]\nstate_size = 16\nmodel_size = 16\n[align]\ndepths = 1, 2, 3, 4\nprobe_size = 16\n",
        "x",
    )
    .unwrap();
    for cfg in alignment_grid(&base).unwrap() {
        let net = init_network(&cfg).unwrap();
        let p = measure_alignment(&net, &probe_batch(&cfg).unwrap(), RuleKind::OnlineTraces, 0).unwrap();
        let mean = p.mean_cosine.unwrap();
        println!("depth {}: cosine at init {mean:.4}", cfg.model.num_layers);
        assert!(mean > 0.0);
        if cfg.model.num_layers == 1 {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn grid_is_the_product_of_its_axes() {
    let cfg = RunConfig::parse("[align]\ndepths = 1, 2\nlambda_min = 0, 0.5, 0.9\n", "x").unwrap();
    let cells = alignment_grid(&cfg).unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!((cells[5].model.num_layers, cells[5].model.r_min), (2, 0.9));
    let empty = RunConfig::parse("[align]\ndepths =\n", "x").unwrap();
    assert!(alignment_grid(&empty).is_err());
    assert!(alignment_grid(&RunConfig::default()).is_err());
}
