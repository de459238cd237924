//! Two-stage progressive optimization around the fine-to-coarse engine.
//!
//! Stage 1 keeps weights in full precision, quantizes activations only, and
//! reconstructs with a two-level plan (coarsest level 1). Stage 2 quantizes
//! weights as well (calibrated from the stage-1-updated values), rebuilds
//! the plan up to the model's full coarsest level, and reconstructs again,
//! inheriting every parameter from stage 1. The conventional fixed-
//! granularity baseline reuses the same machinery with a single-level plan.

use crate::recon::{
    build_plan, compute_g, pfcr_run, single_level_plan, InputPolicy, ReconError, UnitCurve,
};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{ModelError, ModelState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("learning-rate schedule underflows at level {level}: factor 1 - 0.2*g is not positive")]
    Overflow { level: u32 },
}

/// Diminishing per-level learning rate `lr0 * (1 - 0.2 g)`; levels 5 and up
/// would receive a non-positive rate and are rejected.
pub fn lr_for(g: u32, lr0: f64) -> Result<f64, ScheduleError> {
    let factor = 1.0 - 0.2 * g as f64;
    if factor <= 0.0 {
        return Err(ScheduleError::Overflow { level: g });
    }
    Ok(lr0 * factor)
}

/// Growing per-level iteration budget `round(iter0 * (1 + 0.2 g))`.
pub fn iter_for(g: u32, iter0: usize) -> usize {
    (iter0 as f64 * (1.0 + 0.2 * g as f64)).round() as usize
}

#[derive(Debug, Error)]
pub enum PosError {
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: ReconError,
        /// Curves from stages that completed before the failure.
        partial: Vec<StageCurves>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

impl PosError {
    /// The stage in which the run failed, when identifiable.
    pub fn failed_stage(&self) -> Option<&str> {
        match self {
            PosError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Two-stage progressive optimization over the fine-to-coarse plan.
    PfcrPos,
    /// Fine-to-coarse reconstruction in a single stage.
    Pfcr,
    /// Single-granularity block-wise baseline (one stage).
    Blockwise,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::PfcrPos => "pfcr-pos",
            Method::Pfcr => "pfcr",
            Method::Blockwise => "blockwise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosConfig {
    pub bits: u32,
    pub lr0: f64,
    pub iter0: usize,
    pub stage1_enabled: bool,
    pub input_policy: InputPolicy,
    pub seed: u64,
    /// Re-derive activation ranges at the start of stage 2 instead of
    /// carrying the stage-1 scales.
    pub recalibrate_acts_stage2: bool,
    /// Asymmetric bit-widths; `None` follows `bits`.
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
}

impl PosConfig {
    pub fn weight_bits(&self) -> u32 {
        self.weight_bits.unwrap_or(self.bits)
    }

    pub fn act_bits(&self) -> u32 {
        self.act_bits.unwrap_or(self.bits)
    }

    pub fn validate(&self) -> Result<(), PosError> {
        if self.bits < 2 || self.weight_bits() < 2 || self.act_bits() < 2 {
            return Err(PosError::BadConfig(format!("bits must be >= 2, got {}", self.bits)));
        }
        if !(self.lr0 > 0.0) {
            return Err(PosError::BadConfig(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.iter0 < 1 {
            return Err(PosError::BadConfig("iter0 must be >= 1".into()));
        }
        Ok(())
    }

    /// Base iteration budget by bit-width when none is given explicitly:
    /// heavier optimization at lower precision.
    pub fn default_iter0(bits: u32) -> usize {
        match bits {
            b if b <= 3 => 800,
            b if b <= 5 => 300,
            _ => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCurves {
    pub name: String,
    pub curves: Vec<UnitCurve>,
    pub wall_clock_s: f64,
}

#[derive(Debug)]
pub struct PosOutcome<S: Scalar> {
    pub model: ModelState<S>,
    pub stages: Vec<StageCurves>,
}

fn timed_pfcr<S: Scalar>(
    name: &str,
    model: &mut ModelState<S>,
    model_fp: &ModelState<S>,
    recon_batches: &[Tensor<S>],
    plan: &crate::recon::ReconPlan,
) -> Result<StageCurves, ReconError> {
    let t0 = std::time::Instant::now();
    let curves = pfcr_run(model, model_fp, recon_batches, plan)?;
    Ok(StageCurves { name: name.to_string(), curves, wall_clock_s: t0.elapsed().as_secs_f64() })
}

/// Stage 1: activations quantized, weights full precision, coarsest level 1.
/// Trains unit weights and activation-quantizer scales.
pub fn run_stage1<S: Scalar>(
    model_fp: &ModelState<S>,
    calib: &[Tensor<S>],
    recon_batches: &[Tensor<S>],
    cfg: &PosConfig,
) -> Result<(ModelState<S>, StageCurves), PosError> {
    cfg.validate()?;
    let mut model = model_fp.clone();
    model.attach_act_quantizers(cfg.act_bits(), calib)?;
    model.act_quant_enabled = true;
    model.weight_quant_enabled = false;
    let plan = build_plan(model.config.depth, 1, cfg.lr0, cfg.iter0, cfg.input_policy)?;
    let curves = timed_pfcr("stage1", &mut model, model_fp, recon_batches, &plan)
        .map_err(|source| PosError::Stage { stage: "stage1".into(), source, partial: vec![] })?;
    Ok((model, curves))
}

/// Stage 2: weights quantized too (calibrated from the current, possibly
/// stage-1-updated weights), full coarsest level, all parameters inherited.
pub fn run_stage2<S: Scalar>(
    model: &mut ModelState<S>,
    model_fp: &ModelState<S>,
    calib: &[Tensor<S>],
    recon_batches: &[Tensor<S>],
    cfg: &PosConfig,
) -> Result<StageCurves, PosError> {
    cfg.validate()?;
    prepare_stage2(model, calib, cfg)?;
    let coarsest = compute_g(model.config.depth)?;
    let plan = build_plan(model.config.depth, coarsest, cfg.lr0, cfg.iter0, cfg.input_policy)?;
    timed_pfcr("stage2", model, model_fp, recon_batches, &plan)
        .map_err(|source| PosError::Stage { stage: "stage2".into(), source, partial: vec![] })
}

fn prepare_stage2<S: Scalar>(
    model: &mut ModelState<S>,
    calib: &[Tensor<S>],
    cfg: &PosConfig,
) -> Result<(), PosError> {
    let has_act_quant = model.act_quantizers().next().is_some();
    if !has_act_quant || cfg.recalibrate_acts_stage2 {
        // Record ranges on the unquantized forward of the current weights.
        let (w, a) = (model.weight_quant_enabled, model.act_quant_enabled);
        model.weight_quant_enabled = false;
        model.act_quant_enabled = false;
        model.attach_act_quantizers(cfg.act_bits(), calib)?;
        model.weight_quant_enabled = w;
        model.act_quant_enabled = a;
    }
    model.act_quant_enabled = true;
    model.attach_weight_quantizers(cfg.weight_bits())?;
    model.weight_quant_enabled = true;
    Ok(())
}

/// The full two-stage pipeline; with `stage1_enabled` off this is the
/// one-stage variant starting directly from the full-precision model.
pub fn run_pos<S: Scalar>(
    model_fp: &ModelState<S>,
    calib: &[Tensor<S>],
    recon_batches: &[Tensor<S>],
    cfg: &PosConfig,
) -> Result<PosOutcome<S>, PosError> {
    cfg.validate()?;
    let mut stages = Vec::new();
    let mut model = if cfg.stage1_enabled {
        let (model, curves) = run_stage1(model_fp, calib, recon_batches, cfg)?;
        stages.push(curves);
        model
    } else {
        model_fp.clone()
    };
    match run_stage2(&mut model, model_fp, calib, recon_batches, cfg) {
        Ok(curves) => stages.push(curves),
        Err(PosError::Stage { stage, source, .. }) => {
            return Err(PosError::Stage { stage, source, partial: stages });
        }
        Err(other) => return Err(other),
    }
    Ok(PosOutcome { model, stages })
}

/// Fixed block-granularity reconstruction with an explicit per-unit budget;
/// optionally two-stage (activations first) for the strategy-only ablation.
pub fn run_blockwise<S: Scalar>(
    model_fp: &ModelState<S>,
    calib: &[Tensor<S>],
    recon_batches: &[Tensor<S>],
    cfg: &PosConfig,
    iters_per_unit: usize,
    two_stage: bool,
) -> Result<PosOutcome<S>, PosError> {
    cfg.validate()?;
    let depth = model_fp.config.depth;
    let mut stages = Vec::new();
    let mut model = model_fp.clone();

    if two_stage {
        model.attach_act_quantizers(cfg.act_bits(), calib)?;
        model.act_quant_enabled = true;
        let plan = single_level_plan(depth, 1, cfg.lr0, iters_per_unit, cfg.input_policy)?;
        let curves = timed_pfcr("stage1", &mut model, model_fp, recon_batches, &plan)
            .map_err(|source| PosError::Stage { stage: "stage1".into(), source, partial: vec![] })?;
        stages.push(curves);
    }

    prepare_stage2(&mut model, calib, cfg)?;
    let plan = single_level_plan(depth, 1, cfg.lr0, iters_per_unit, cfg.input_policy)?;
    let name = if two_stage { "stage2" } else { "main" };
    match timed_pfcr(name, &mut model, model_fp, recon_batches, &plan) {
        Ok(curves) => stages.push(curves),
        Err(source) => return Err(PosError::Stage { stage: name.into(), source, partial: stages }),
    }
    Ok(PosOutcome { model, stages })
}

/// Total unit-iterations a one-stage fine-to-coarse run spends, used to give
/// the block-wise baseline a matched budget.
pub fn pfcr_one_stage_total_iters(depth: usize, iter0: usize) -> Result<usize, PosError> {
    let coarsest = compute_g(depth)?;
    let plan = build_plan(depth, coarsest, 1.0, iter0, InputPolicy::QuantizedInput)?;
    Ok(plan.total_unit_iterations())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_for(0, 4e-5).unwrap(), 4e-5);
        assert_eq!(lr_for(2, 4e-5).unwrap(), 2.4e-5);
        assert_eq!(lr_for(3, 4e-5).unwrap(), 1.6e-5);
        assert!(matches!(lr_for(5, 4e-5), Err(ScheduleError::Overflow { level: 5 })));
        assert!(matches!(lr_for(9, 4e-5), Err(ScheduleError::Overflow { .. })));
    }

    #[test]
    fn iter_schedule_values() {
        assert_eq!(iter_for(0, 800), 800);
        assert_eq!(iter_for(3, 800), 1280);
        assert_eq!(iter_for(1, 250), 300);
    }

    #[test]
    fn schedules_are_monotone_over_valid_levels() {
        let mut last_lr = f64::INFINITY;
        let mut last_it = 0usize;
        for g in 0..=4u32 {
            let lr = lr_for(g, 4e-5).unwrap();
            let it = iter_for(g, 100);
            assert!(lr < last_lr, "lr must strictly decrease");
            assert!(it > last_it || g == 0, "iters must strictly increase");
            last_lr = lr;
            last_it = it;
        }
    }

    #[test]
    fn default_iteration_budgets() {
        assert_eq!(PosConfig::default_iter0(3), 800);
        assert_eq!(PosConfig::default_iter0(4), 300);
        assert_eq!(PosConfig::default_iter0(6), 100);
    }

    #[test]
    fn config_validation() {
        let good = PosConfig {
            bits: 3,
            lr0: 4e-5,
            iter0: 10,
            stage1_enabled: true,
            input_policy: InputPolicy::QuantizedInput,
            seed: 0,
            recalibrate_acts_stage2: false,
            weight_bits: None,
            act_bits: None,
        };
        assert!(good.validate().is_ok());
        assert!(PosConfig { bits: 1, ..good }.validate().is_err());
        assert!(PosConfig { lr0: 0.0, ..good }.validate().is_err());
        assert!(PosConfig { iter0: 0, ..good }.validate().is_err());
    }
}
