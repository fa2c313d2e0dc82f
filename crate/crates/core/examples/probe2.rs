use context_track::config::ExperimentConfig;
use context_track::context::InstanceObservation;
use context_track::harness::{evaluation_scenario, train_context_head};
use context_track::tensor::{softmax_rows, Tensor};

// per-frame: with a clean (ground-truth) previous state, how sharp/correct is
// softmax(state_fused . ctx_fused^T / sqrt(C)) after 0 blocks (raw), and does
// the iterated LN(x + A Qhat) hidden stream degrade it?
fn main() {
    let config = ExperimentConfig::twin_benchmark();
    for seed in [4u64, 5, 6] {
        let head = train_context_head(&config, seed).unwrap().model;
        let eval = evaluation_scenario(&config, seed).unwrap();
        let ctxs: Vec<_> = eval
            .frames
            .iter()
            .map(|f| head.extract(&f.observation).unwrap())
            .collect();
        println!("--- seed {seed}");
        for t in 1..eval.frames.len() {
            let prev: &InstanceObservation = &eval.frames[t - 1].observation;
            let cur = &eval.frames[t].observation;
            let c = cur.channels() as f64;
            // oracle previous state: slot i = object i (clean state)
            let n = prev.num_instances();
            let mut state_fused = Tensor::zeros(&[n, cur.channels()]);
            for (d, &obj) in eval.frames[t - 1].detection_object.iter().enumerate() {
                state_fused.data_mut()[obj * cur.channels()..(obj + 1) * cur.channels()]
                    .copy_from_slice(ctxs[t - 1].fused.row(d));
            }
            let logits = state_fused
                .matmul(&ctxs[t].fused.transpose())
                .unwrap()
                .scale(1.0 / c.sqrt());
            let attn = softmax_rows(&logits);
            // correctness: argmax of row obj should be the detection holding obj
            let mut correct = 0;
            let mut mass = 0.0;
            for obj in 0..n {
                let row = attn.row(obj);
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                let want = eval.frames[t]
                    .detection_object
                    .iter()
                    .position(|&o| o == obj)
                    .unwrap();
                if arg == want {
                    correct += 1;
                }
                mass += row[want];
            }
            // twin visibility at this frame
            let vis: Vec<usize> = (0..n)
                .filter(|&k| eval.tracks[k].visible_at(t).is_some())
                .collect();
            println!(
                "t={t}: raw-A correct {correct}/{n}, mean correct-mass {:.3}, visible {}",
                mass / n as f64,
                vis.len()
            );
        }
    }
}
