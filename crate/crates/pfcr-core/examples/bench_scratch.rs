use pfcr_core::harness::{evaluate_top1, make_synthetic, train_baseline, Split};
use pfcr_core::vit::ViTConfig;
use std::time::Instant;

fn main() {
    let cfg = ViTConfig {
        depth: 6, embed_dim: 64, heads: 4, patch_size: 8, image_size: 32,
        in_channels: 1, mlp_ratio: 4.0, num_classes: 10,
    };
    let noise: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_train: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let train = make_synthetic(10, n_train, 32, 5, noise);
    let mut eval = make_synthetic(10, 1000, 32, 77, noise);
    eval.split = Split::Eval;

    let t0 = Instant::now();
    let (model, acc) = train_baseline(&cfg, &train, &eval, epochs, lr, 64, 1).unwrap();
    let train_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let train_acc = evaluate_top1(&model, &train);
    let eval_s = t1.elapsed().as_secs_f64();
    println!("noise={noise} epochs={epochs} n={n_train} lr={lr}");
    println!("train time {train_s:.1}s, eval time {eval_s:.2}s (1000 samples)");
    println!("eval acc {acc:.4}, train acc {train_acc:.4}");
}
