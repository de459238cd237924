//! Stage behavior of the two-stage optimization pipeline and its block-wise
//! ablation twin.

use pfcr_core::harness::{image_batches, make_synthetic};
use pfcr_core::pos::{run_blockwise, run_pos, run_stage1, run_stage2, PosConfig};
use pfcr_core::recon::{pfcr_run, single_level_plan, InputPolicy};
use pfcr_core::tensor::Tensor;
use pfcr_core::vit::{ModelState, ViTConfig};

fn toy_config(depth: usize) -> ViTConfig {
    ViTConfig {
        depth,
        embed_dim: 8,
        heads: 2,
        patch_size: 4,
        image_size: 8,
        in_channels: 1,
        mlp_ratio: 2.0,
        num_classes: 3,
    }
}

fn pos_config(iter0: usize) -> PosConfig {
    PosConfig {
        bits: 3,
        lr0: 1e-3,
        iter0,
        stage1_enabled: true,
        input_policy: InputPolicy::QuantizedInput,
        seed: 0,
        recalibrate_acts_stage2: false,
        weight_bits: None,
        act_bits: None,
    }
}

fn data_batches(seed: u64) -> Vec<Tensor<f32>> {
    let ds = make_synthetic(3, 32, 8, seed, 0.2);
    image_batches(&ds, 8)
}

#[test]
fn stage1_keeps_weights_full_precision() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 3).unwrap();
    let batches = data_batches(1);
    let (model, curves) = run_stage1(&fp, &batches[..1], &batches, &pos_config(2)).unwrap();

    assert!(!model.weight_quant_enabled, "no weight fake-quant is active after stage 1");
    assert!(model.act_quant_enabled);
    assert_eq!(model.weight_quantizer_count(), 0, "weights carry no quantizers in stage 1");
    assert!(model.act_quantizers().count() > 0);

    // coarsest level 1: curve levels are exactly {0, 1}
    let levels: std::collections::BTreeSet<u32> = curves.curves.iter().map(|c| c.level).collect();
    assert_eq!(levels.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(curves.name, "stage1");
}

#[test]
fn stage2_calibrates_weights_from_stage1_result_and_inherits() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 3).unwrap();
    let batches = data_batches(2);
    let cfgp = pos_config(3);

    let (mut model, _) = run_stage1(&fp, &batches[..1], &batches, &cfgp).unwrap();
    let stage1_weight = model.param("blocks.00.attn.wq").tensor.clone();
    let stage1_act_scale = model.act_quantizer("blocks.00.attn.probs").unwrap().params.scale.clone();
    assert_ne!(stage1_weight.data, fp.param("blocks.00.attn.wq").tensor.data, "stage 1 should move unit weights");

    run_stage2(&mut model, &fp, &batches[..1], &batches, &cfgp).unwrap();
    assert!(model.weight_quant_enabled && model.act_quant_enabled);
    assert_eq!(model.weight_quantizer_count(), model.weight_matrix_names().len());

    // Scales train during stage 2, so probe the attach-time state with a
    // vanishing learning rate: stage 2 must calibrate weight quantizers from
    // the stage-1-updated weights and carry stage-1 activation scales.
    let (probe, _) = run_stage1(&fp, &batches[..1], &batches, &cfgp).unwrap();
    let mut probe2 = probe.clone();
    let frozen_cfg = PosConfig { iter0: 1, lr0: 1e-30, ..cfgp };
    run_stage2(&mut probe2, &fp, &batches[..1], &batches, &frozen_cfg).unwrap();

    let q = probe2.param("blocks.01.mlp.w2").quant.as_ref().unwrap();
    let expect =
        pfcr_core::quant::calibrate_minmax(&probe.param("blocks.01.mlp.w2").tensor, &q.spec).unwrap();
    assert_eq!(q.params.scale, expect.scale, "weight scales calibrated from stage-1 weights");

    let carried = probe2.act_quantizer("blocks.00.attn.probs").unwrap().params.scale.clone();
    assert_eq!(carried, stage1_act_scale, "stage 2 carries stage-1 activation scales");
}

#[test]
fn one_stage_pipeline_skips_stage1() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 5).unwrap();
    let batches = data_batches(3);
    let cfgp = PosConfig { stage1_enabled: false, ..pos_config(2) };
    let out = run_pos(&fp, &batches[..1], &batches, &cfgp).unwrap();
    assert_eq!(out.stages.len(), 1);
    assert_eq!(out.stages[0].name, "stage2");
}

#[test]
fn two_stage_pipeline_reports_both_stages() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 5).unwrap();
    let batches = data_batches(4);
    let out = run_pos(&fp, &batches[..1], &batches, &pos_config(2)).unwrap();
    assert_eq!(out.stages.len(), 2);
    assert_eq!(out.stages[0].name, "stage1");
    assert_eq!(out.stages[1].name, "stage2");
}

#[test]
fn coarser_levels_start_from_finer_results() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 7).unwrap();
    let batches = data_batches(5);

    let mut quantized = fp.clone();
    quantized.attach_quantizers(3, 3, &batches[..1]).unwrap();
    quantized.weight_quant_enabled = true;
    quantized.act_quant_enabled = true;

    // one pfcr pass over levels {0, 1}
    let mut joint = quantized.clone();
    let plan = pfcr_core::recon::build_plan(2, 1, 1e-3, 2, InputPolicy::QuantizedInput).unwrap();
    pfcr_run(&mut joint, &fp, &batches, &plan).unwrap();

    // the same two levels run one after the other on the same model
    let mut sequential = quantized.clone();
    let level0 = single_level_plan(2, 0, 1e-3, 2, InputPolicy::QuantizedInput).unwrap();
    pfcr_run(&mut sequential, &fp, &batches, &level0).unwrap();
    let after_level0 = sequential.clone();
    let level1 = single_level_plan(2, 1, pfcr_core::pos::lr_for(1, 1e-3).unwrap(), pfcr_core::pos::iter_for(1, 2), InputPolicy::QuantizedInput).unwrap();
    pfcr_run(&mut sequential, &fp, &batches, &level1).unwrap();

    assert_ne!(after_level0, sequential, "level 1 must train further");
    assert_eq!(joint, sequential, "level 1 starts exactly from level 0's parameters");
}

#[test]
fn blockwise_runner_equals_single_level_plan_code_path() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 9).unwrap();
    let batches = data_batches(6);
    let cfgp = PosConfig { stage1_enabled: false, ..pos_config(4) };

    let via_runner = run_blockwise(&fp, &batches[..1], &batches, &cfgp, 4, false).unwrap();

    let mut manual = fp.clone();
    manual.attach_act_quantizers(3, &batches[..1]).unwrap();
    manual.act_quant_enabled = true;
    manual.attach_weight_quantizers(3).unwrap();
    manual.weight_quant_enabled = true;
    let plan = single_level_plan(2, 1, cfgp.lr0, 4, InputPolicy::QuantizedInput).unwrap();
    pfcr_run(&mut manual, &fp, &batches, &plan).unwrap();

    assert_eq!(via_runner.model, manual);
}

#[test]
fn nan_failure_reports_the_stage() {
    let cfg = toy_config(2);
    let fp = ModelState::<f32>::init(&cfg, 11).unwrap();
    let batches = data_batches(7);
    // An absurd learning rate drives the reconstruction loss to NaN.
    let cfgp = PosConfig { lr0: 1e30, ..pos_config(50) };
    match run_pos(&fp, &batches[..1], &batches, &cfgp) {
        Err(pfcr_core::pos::PosError::Stage { stage, source, .. }) => {
            assert!(stage == "stage1" || stage == "stage2");
            assert!(matches!(source, pfcr_core::recon::ReconError::NanLoss { .. }));
        }
        other => panic!("expected a stage failure, got {:?}", other.map(|o| o.stages.len())),
    }
}
