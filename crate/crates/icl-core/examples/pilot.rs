use icl_core::tasks::TaskSpec;
use icl_core::train::{train_run, TrainConfig};
use icl_core::transformer::ModelConfig;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ffn: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let cfg = ModelConfig {
        depth: 4, width: 128, heads: 4, ffn_multiplier: ffn,
        max_context_pairs: 40, d_x: 20, d_y: 1, positional: true, seed: 1,
    };
    let spec = TaskSpec::linear(20, 0.1);
    let tc = TrainConfig {
        learning_rate: lr,
        weight_decay: 0.01,
        dropout: 0.1,
        batch_size: 32,
        warmup_steps: (steps / 20).max(100),
        total_steps: steps,
        floor_lr: 0.0,
        seed: 5,
        k_grid: vec![2, 5, 10, 20, 40],
        eval_tasks: 100,
        eval_queries: 5,
    };
    let t = Instant::now();
    let (rec, _) = train_run(&cfg, &spec, &tc).unwrap();
    let dt = t.elapsed().as_secs_f64();
    // smoothed trajectory: mean over 100-step windows
    let smooth: Vec<f64> = rec.loss_trajectory.chunks(steps / 10).map(|c| {
        c.iter().map(|x| x.1).sum::<f64>() / c.len() as f64
    }).collect();
    println!("ffn={ffn} lr={lr} steps={steps}: {:.0}s, {:.3}s/step", dt, dt / steps as f64);
    println!("  loss windows: {:?}", smooth.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>());
    for p in &rec.eval {
        println!("  k={:2}  err={:.3} ± {:.3}", p.k, p.mean_error, p.stderr);
    }
}
