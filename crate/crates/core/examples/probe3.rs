use context_track::config::ExperimentConfig;
use context_track::harness::{
    eval_tracker, evaluation_scenario, train_context_head, train_tracker,
};
use context_track::tracker::{KeySource, TrackerOptions};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3e-3);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let mut config = ExperimentConfig::twin_benchmark();
    config.optimizer.tracker_steps = steps;

    for seed in 0..4u64 {
        let t0 = Instant::now();
        let head = train_context_head(&config, seed).unwrap().model;
        let eval = evaluation_scenario(&config, seed).unwrap();
        let opts = TrackerOptions {
            key_source: KeySource::Fused,
            alignment: true,
        };
        let pre = config.init_tracker(seed);
        let (_, pre_m) = eval_tracker(&eval, &head, &pre, &opts).unwrap();

        let mut cfg2 = config.clone();
        cfg2.optimizer.learning_rate = lr;
        let outcome = train_tracker(&cfg2, seed, &head).unwrap();
        let (_, post_m) = eval_tracker(&eval, &head, &outcome.model, &opts).unwrap();

        let core_opts = TrackerOptions {
            key_source: KeySource::Core,
            alignment: true,
        };
        let mut cfg3 = cfg2.clone();
        cfg3.model.key_source = context_track::config::KeySourceConfig::Core;
        let core_out = train_tracker(&cfg3, seed, &head).unwrap();
        let (_, core_m) = eval_tracker(&eval, &head, &core_out.model, &core_opts).unwrap();

        println!(
            "seed {seed}: pre {:.3} -> post {:.3} (loss {:.1} -> {:.1}) | trained core-key {:.3}  [{:.2?}]",
            pre_m.association_accuracy,
            post_m.association_accuracy,
            outcome.final_metrics["loss_first"],
            outcome.final_metrics["loss_last"],
            core_m.association_accuracy,
            t0.elapsed()
        );
    }
}
