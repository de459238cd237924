use super::dataset::{default_recon_count, image_batches, make_synthetic, sample_calibration, Dataset, Split};
use super::idx::load_idx_dataset;
use super::report::{DatasetConfig, RunConfig, RunReport};
use super::train::evaluate_top1;
use super::HarnessError;
use crate::pos::{pfcr_one_stage_total_iters, run_blockwise, run_pos, Method, PosError};
use crate::tensor::Tensor;
use crate::vit::{ModelState, ViTConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_dataset(cfg: &DatasetConfig, model: &ViTConfig) -> Result<PreparedData, HarnessError> {
    match cfg {
        DatasetConfig::Synthetic { num_classes, n_train, n_eval, image_size, seed, noise } => {
            if *num_classes != model.num_classes {
                return Err(HarnessError::Config(format!(
                    "dataset has {num_classes} classes but the model expects {}",
                    model.num_classes
                )));
            }
            if *image_size != model.image_size {
                return Err(HarnessError::Config(format!(
                    "dataset image size {image_size} does not match model image size {}",
                    model.image_size
                )));
            }
            let train = make_synthetic(*num_classes, *n_train, *image_size, *seed, *noise);
            let mut eval = make_synthetic(*num_classes, *n_eval, *image_size, seed.wrapping_add(0x9e37), *noise);
            eval.split = Split::Eval;
            Ok(PreparedData { train, eval })
        }
        DatasetConfig::Idx { train_images, train_labels, eval_images, eval_labels } => {
            let train = load_idx_dataset(train_images, train_labels, model.image_size, Split::Train)?;
            let eval = load_idx_dataset(eval_images, eval_labels, model.image_size, Split::Eval)?;
            Ok(PreparedData { train, eval })
        }
    }
}

#[derive(Debug)]
pub struct QuantizeOutcome {
    /// `None` when a stage failed numerically; the report still carries the
    /// partial curves and the failure flag.
    pub model: Option<ModelState<f32>>,
    pub report: RunReport,
}

/// Reconstruction minibatches: the sampled reconstruction set, order
/// shuffled by the quantization seed, split into fixed batches.
pub(crate) fn recon_image_batches(recon: &Dataset, batch: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut indices: Vec<usize> = (0..recon.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let shuffled = recon.select(&indices, Split::Train);
    image_batches(&shuffled, batch)
}

/// Runs the configured quantization method against a trained baseline and
/// assembles the run report. Numerical failures (non-finite loss) produce a
/// report with `failed_stage` set instead of an `Err`.
pub fn quantize_run(
    cfg: &RunConfig,
    baseline: &ModelState<f32>,
    data: &PreparedData,
    overrides: Vec<String>,
) -> Result<QuantizeOutcome, HarnessError> {
    let n_recon = cfg.sampling.n_recon.unwrap_or_else(|| default_recon_count(data.train.len()));
    let (calib, recon) = sample_calibration(&data.train, cfg.sampling.n_calib, n_recon, cfg.sampling.seed)?;
    let calib_batches = image_batches(&calib, cfg.recon_batch);
    let recon_batches = recon_image_batches(&recon, cfg.recon_batch, cfg.quant.seed);

    let baseline_accuracy = evaluate_top1(baseline, &data.eval);

    let pos_cfg = cfg.quant.to_pos_config(match cfg.method {
        Method::PfcrPos => cfg.quant.stage1_enabled,
        Method::Pfcr | Method::Blockwise => false,
    });

    let result = match cfg.method {
        Method::PfcrPos | Method::Pfcr => run_pos(baseline, &calib_batches, &recon_batches, &pos_cfg),
        Method::Blockwise => {
            let iters = blockwise_matched_iters(cfg)?;
            run_blockwise(baseline, &calib_batches, &recon_batches, &pos_cfg, iters, false)
        }
    };

    let report = |stages, quantized_accuracy, failed_stage, error| RunReport {
        config: cfg.clone(),
        overrides: overrides.clone(),
        baseline_accuracy,
        quantized_accuracy,
        stages,
        failed_stage,
        error,
    };

    match result {
        Ok(outcome) => {
            let acc = evaluate_top1(&outcome.model, &data.eval);
            Ok(QuantizeOutcome { model: Some(outcome.model), report: report(outcome.stages, Some(acc), None, None) })
        }
        Err(PosError::Stage { stage, source, partial }) => Ok(QuantizeOutcome {
            model: None,
            report: report(partial, None, Some(stage), Some(source.to_string())),
        }),
        Err(other) => Err(other.into()),
    }
}

/// Per-unit budget giving the block-wise baseline the same total iteration
/// count as the one-stage fine-to-coarse run it is compared against.
pub fn blockwise_matched_iters(cfg: &RunConfig) -> Result<usize, PosError> {
    let total = pfcr_one_stage_total_iters(cfg.model.depth, cfg.quant.iter0())?;
    Ok(((total as f64) / (cfg.model.depth as f64)).round().max(1.0) as usize)
}

#[cfg(test)]
pub(crate) fn tests_support_tiny_config() -> RunConfig {
    use crate::harness::report::{BaselineConfig, QuantSettings, SamplingConfig};
    use crate::recon::InputPolicy;
    RunConfig {
        model: ViTConfig {
            depth: 2,
            embed_dim: 8,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            in_channels: 1,
            mlp_ratio: 2.0,
            num_classes: 3,
        },
        dataset: DatasetConfig::Synthetic { num_classes: 3, n_train: 96, n_eval: 48, image_size: 8, seed: 5, noise: 0.2 },
        baseline: BaselineConfig { checkpoint: None, epochs: 1, lr: 1e-3, batch: 32, seed: 1 },
        sampling: SamplingConfig { n_calib: 8, n_recon: Some(16), seed: 2 },
        quant: QuantSettings {
            bits: 3,
            weight_bits: None,
            act_bits: None,
            lr0: 1e-3,
            iter0: Some(2),
            stage1_enabled: true,
            input_policy: InputPolicy::QuantizedInput,
            seed: 3,
            recalibrate_acts_stage2: false,
        },
        method: Method::PfcrPos,
        recon_batch: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_run_config() -> RunConfig {
        tests_support_tiny_config()
    }

    #[test]
    fn pos_run_emits_two_stage_report_and_quantized_model() {
        let cfg = tiny_run_config();
        let data = load_dataset(&cfg.dataset, &cfg.model).unwrap();
        let baseline = ModelState::<f32>::init(&cfg.model, 9).unwrap();
        let out = quantize_run(&cfg, &baseline, &data, vec![]).unwrap();
        assert!(out.model.is_some());
        let report = out.report;
        assert_eq!(report.stages.len(), 2);
        assert_eq!(report.stages[0].name, "stage1");
        assert_eq!(report.stages[1].name, "stage2");
        assert!(report.failed_stage.is_none());
        let acc = report.quantized_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));

        let model = out.model.unwrap();
        // stage 2 leaves every projection matrix carrying a quantizer
        assert_eq!(model.weight_quantizer_count(), model.weight_matrix_names().len());
        assert!(model.weight_quant_enabled && model.act_quant_enabled);
    }

    #[test]
    fn quantize_run_is_deterministic() {
        let cfg = tiny_run_config();
        let data = load_dataset(&cfg.dataset, &cfg.model).unwrap();
        let baseline = ModelState::<f32>::init(&cfg.model, 9).unwrap();
        let a = quantize_run(&cfg, &baseline, &data, vec![]).unwrap();
        let b = quantize_run(&cfg, &baseline, &data, vec![]).unwrap();
        assert_eq!(a.report.replay_key(), b.report.replay_key());
        assert_eq!(a.model.unwrap(), b.model.unwrap());
    }

    #[test]
    fn blockwise_budget_matches_one_stage_total() {
        let cfg = tiny_run_config();
        // depth 2: levels 0..=2 with unit counts [4, 2, 1]; iter0 = 2 gives
        // totals 4*2 + 2*round(2.4) + 1*round(2.8) = 8 + 4 + 3 = 15.
        let iters = blockwise_matched_iters(&cfg).unwrap();
        assert_eq!(iters, 8); // round(15 / 2)
    }

    #[test]
    fn dataset_model_mismatch_is_config_error() {
        let mut cfg = tiny_run_config();
        cfg.model.num_classes = 7;
        assert!(matches!(load_dataset(&cfg.dataset, &cfg.model), Err(HarnessError::Config(_))));
    }
}
