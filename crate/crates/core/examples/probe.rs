use context_track::config::ExperimentConfig;
use context_track::harness::run_twin_benchmark;
use std::time::Instant;

fn main() {
    let config = ExperimentConfig::twin_benchmark();
    let mut sums = [0.0f64; 5];
    let seeds = 8u64;
    let start = Instant::now();
    for seed in 0..seeds {
        let t0 = Instant::now();
        let run = run_twin_benchmark(&config, seed).unwrap();
        let row = [
            run.tracker_fused.association_accuracy,
            run.tracker_core.association_accuracy,
            run.tracker_misaligned.association_accuracy,
            run.baseline_core.association_accuracy,
            run.baseline_fused.association_accuracy,
        ];
        for (s, r) in sums.iter_mut().zip(&row) {
            *s += r;
        }
        println!(
            "seed {seed}: fused {:.3} core {:.3} misaligned {:.3} | minvis core {:.3} fused {:.3}  ({:.2?})",
            row[0], row[1], row[2], row[3], row[4], t0.elapsed()
        );
    }
    let n = seeds as f64;
    println!(
        "MEAN over {seeds}: fused {:.3} core {:.3} misaligned {:.3} | minvis core {:.3} fused {:.3}",
        sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, sums[4] / n
    );
    println!("total {:.2?}", start.elapsed());
}
