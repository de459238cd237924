use pfcr_core::harness::*;
use pfcr_core::vit::{ModelState, ViTConfig};
use pfcr_core::pos::Method;
use pfcr_core::recon::InputPolicy;
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iter0: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr0: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let bits: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n_recon: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let noise: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.25);
    let seeds: Vec<u64> = args.get(6).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![11]);

    let cfg = RunConfig {
        model: ViTConfig { depth: 6, embed_dim: 64, heads: 4, patch_size: 8, image_size: 32, in_channels: 1, mlp_ratio: 4.0, num_classes: 10 },
        dataset: DatasetConfig::Synthetic { num_classes: 10, n_train: 2000, n_eval: 1000, image_size: 32, seed: 5, noise },
        baseline: BaselineConfig { checkpoint: None, epochs: 8, lr: 2e-3, batch: 64, seed: 1 },
        sampling: SamplingConfig { n_calib: 64, n_recon: Some(n_recon), seed: 2 },
        quant: QuantSettings { bits, weight_bits: None, act_bits: None, lr0, iter0: Some(iter0), stage1_enabled: true, input_policy: InputPolicy::QuantizedInput, seed: 3, recalibrate_acts_stage2: false },
        method: Method::PfcrPos,
        recon_batch: 32,
    };

    let tag = format!("{:.2}", noise);
    let ckpt_path = format!("/tmp/pfcr_baseline_{tag}");
    let ckpt = Path::new(&ckpt_path);
    let data = load_dataset(&cfg.dataset, &cfg.model).unwrap();
    let baseline = if Path::new(&format!("{ckpt_path}.manifest.json")).exists() {
        load_checkpoint(ckpt).unwrap()
    } else {
        let (m, acc) = train_baseline(&cfg.model, &data.train, &data.eval, cfg.baseline.epochs, cfg.baseline.lr, cfg.baseline.batch, cfg.baseline.seed).unwrap();
        println!("trained baseline: eval acc {acc:.4}");
        save_checkpoint(&m, ckpt).unwrap();
        m
    };
    println!("baseline acc {:.4} | iter0={iter0} lr0={lr0} bits={bits} n_recon={n_recon} noise={noise}", evaluate_top1(&baseline, &data.eval));

    for seed in seeds {
        for (name, method, stage1) in [("pfcr-pos", Method::PfcrPos, true), ("pfcr", Method::Pfcr, false), ("blockwise", Method::Blockwise, false)] {
            let mut c = cfg.clone();
            c.method = method;
            c.quant.stage1_enabled = stage1;
            c.sampling.seed = seed;
            c.quant.seed = seed;
            let t = Instant::now();
            let out = quantize_run(&c, &baseline, &data, vec![]).unwrap();
            println!("  seed {seed} {name:10}: acc {:.4} in {:.0}s",
                out.report.quantized_accuracy.unwrap_or(f64::NAN), t.elapsed().as_secs_f64());
        }
    }
}
