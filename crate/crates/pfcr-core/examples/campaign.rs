use pfcr_core::harness::*;
use pfcr_core::vit::{ModelState, ViTConfig};
use pfcr_core::pos::Method;
use pfcr_core::recon::InputPolicy;
use std::path::Path;
use std::time::Instant;

// args: noise n_train epochs blr | iter0 lr0 bits n_recon seeds
fn main() {
    let a: Vec<String> = std::env::args().collect();
    let noise: f64 = a[1].parse().unwrap();
    let n_train: usize = a[2].parse().unwrap();
    let epochs: usize = a[3].parse().unwrap();
    let blr: f64 = a[4].parse().unwrap();
    let iter0: usize = a[5].parse().unwrap();
    let lr0: f64 = a[6].parse().unwrap();
    let bits: u32 = a[7].parse().unwrap();
    let n_recon: usize = a[8].parse().unwrap();
    let seeds: Vec<u64> = a[9].split(',').map(|v| v.parse().unwrap()).collect();

    let cfg = RunConfig {
        model: ViTConfig { depth: 6, embed_dim: 64, heads: 4, patch_size: 8, image_size: 32, in_channels: 1, mlp_ratio: 4.0, num_classes: 10 },
        dataset: DatasetConfig::Synthetic { num_classes: 10, n_train, n_eval: 1000, image_size: 32, seed: 5, noise },
        baseline: BaselineConfig { checkpoint: None, epochs, lr: blr, batch: 64, seed: 1 },
        sampling: SamplingConfig { n_calib: 64, n_recon: Some(n_recon), seed: 2 },
        quant: QuantSettings { bits, weight_bits: None, act_bits: None, lr0, iter0: Some(iter0), stage1_enabled: true, input_policy: InputPolicy::QuantizedInput, seed: 3, recalibrate_acts_stage2: false },
        method: Method::PfcrPos,
        recon_batch: 32,
    };

    let key = format!("/tmp/pfcr_base_n{noise}_t{n_train}_e{epochs}_l{blr}");
    let data = load_dataset(&cfg.dataset, &cfg.model).unwrap();
    let baseline = if Path::new(&format!("{key}.manifest.json")).exists() {
        load_checkpoint(Path::new(&key)).unwrap()
    } else {
        let t = Instant::now();
        let (m, acc) = train_baseline(&cfg.model, &data.train, &data.eval, epochs, blr, 64, 1).unwrap();
        println!("baseline trained in {:.0}s: eval acc {acc:.4}", t.elapsed().as_secs_f64());
        save_checkpoint(&m, Path::new(&key)).unwrap();
        m
    };
    let bacc = evaluate_top1(&baseline, &data.eval);
    println!("== noise={noise} n={n_train} epochs={epochs} | iter0={iter0} lr0={lr0} bits={bits} n_recon={n_recon} | baseline {bacc:.4}");

    let mut medians: Vec<(&str, Vec<f64>)> = vec![("pfcr-pos", vec![]), ("pfcr", vec![]), ("blockwise", vec![])];
    for &seed in &seeds {
        for (i, (name, method, stage1)) in [("pfcr-pos", Method::PfcrPos, true), ("pfcr", Method::Pfcr, false), ("blockwise", Method::Blockwise, false)].iter().enumerate() {
            let mut c = cfg.clone();
            c.method = *method;
            c.quant.stage1_enabled = *stage1;
            c.sampling.seed = seed;
            c.quant.seed = seed;
            let t = Instant::now();
            let out = quantize_run(&c, &baseline, &data, vec![]).unwrap();
            let acc = out.report.quantized_accuracy.unwrap_or(f64::NAN);
            medians[i].1.push(acc);
            println!("  seed {seed} {name:10}: acc {acc:.4} in {:.0}s", t.elapsed().as_secs_f64());
        }
    }
    for (name, mut accs) in medians {
        let m = median(&mut accs).unwrap_or(f64::NAN);
        println!("  MEDIAN {name:10}: {m:.4}");
    }
}
