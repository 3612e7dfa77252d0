//! The online rules keep a footprint independent of sequence length.

mod common;

use common::*;
use lru_online::learning::{run_pass, GradientOptions, OnlineLearner, RuleKind};

#[test]
fn online_footprint_does_not_grow_with_length() {
    let net = random_net(&model(2, 6, 5), 1);
    for rule in [RuleKind::OnlineTraces, RuleKind::Spatial, RuleKind::Truncated1] {
        let short = run_pass(&net, &random_batch(1, 1, 64), rule, &GradientOptions::default()).unwrap();
        let long = run_pass(&net, &random_batch(1, 1, 1024), rule, &GradientOptions::default()).unwrap();
        assert_eq!(short.peak_aux_entries, long.peak_aux_entries, "{rule}");
    }
    let short = run_pass(&net, &random_batch(1, 1, 64), RuleKind::Bptt, &GradientOptions::default()).unwrap();
    let long = run_pass(&net, &random_batch(1, 1, 1024), RuleKind::Bptt, &GradientOptions::default()).unwrap();
    assert!(long.peak_aux_entries > 10 * short.peak_aux_entries);
}

#[test]
fn trace_entries_equal_recurrent_parameter_count() {
    let (n, h) = (7, 3);
    let net = random_net(&model(3, n, h), 2);
    let learner = OnlineLearner::new(&net, RuleKind::OnlineTraces, &GradientOptions::default()).unwrap();
    assert_eq!(learner.trace_entries(), vec![2 * n + n * h; 3]);
    assert_eq!(net.blocks[0].lru.recurrent_param_count(), 2 * n + n * h);
}
