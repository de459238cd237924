//! Fine-to-coarse reconstruction: unit tiling, granularity levels, and MSE
//! reconstruction of quantized units against the frozen full-precision model.
//!
//! The finest units (level 0) are the attention and MLP modules with their
//! shortcuts, 2L of them in network order. Level g tiles the finest units
//! into consecutive groups of 2^g; a trailing group that cannot reach 2^g
//! units is skipped at that level. Reconstruction walks levels from fine to
//! coarse, units in network order, inheriting parameters between levels.

use crate::pos::{iter_for, lr_for, ScheduleError};
use crate::tensor::{cosine_lr, Adam, Scalar, Tape, Tensor, TensorId};
use crate::vit::ModelState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("block depth must be >= 1")]
    BadDepth,
    #[error("requested coarsest level {requested} exceeds admissible level {max}")]
    LevelTooCoarse { requested: u32, max: u32 },
    #[error("reconstruction data is empty")]
    NoData,
    #[error("iteration count must be >= 1")]
    NoIterations,
    #[error("non-finite loss in unit (level {level}, start {start}) at iteration {iteration}")]
    NanLoss { level: u32, start: usize, iteration: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Whether a quantized unit sees inputs propagated through the quantized
/// prefix of the network, or the same full-precision inputs as its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolicy {
    QuantizedInput,
    FpInput,
}

/// One reconstruction target: `2^level` consecutive finest units starting at
/// finest-unit index `start` (which is a multiple of the span).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconUnit {
    pub level: u32,
    pub start: usize,
}

impl ReconUnit {
    pub fn span(&self) -> usize {
        1 << self.level
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.span()
    }
}

/// Coarsest granularity level for an `L`-block model: when the 2L finest
/// units are a power of two, one group may cover the whole network;
/// otherwise the coarsest level is the largest one that still tiles at
/// least two complete groups.
pub fn compute_g(depth: usize) -> Result<u32, ReconError> {
    if depth < 1 {
        return Err(ReconError::BadDepth);
    }
    let units = 2 * depth;
    if units & (units - 1) == 0 {
        Ok(units.trailing_zeros())
    } else {
        Ok(units.ilog2() - 1)
    }
}

/// The 2L level-0 units, alternating attention and MLP, in network order.
pub fn finest_units(depth: usize) -> Vec<ReconUnit> {
    (0..2 * depth).map(|start| ReconUnit { level: 0, start }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    pub level: u32,
    pub units: Vec<ReconUnit>,
    pub lr: f64,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconPlan {
    pub coarsest: u32,
    pub levels: Vec<LevelPlan>,
    pub input_policy: InputPolicy,
}

impl ReconPlan {
    pub fn total_unit_iterations(&self) -> usize {
        self.levels.iter().map(|lv| lv.units.len() * lv.iters).sum()
    }
}

fn tile_level(depth: usize, level: u32) -> Vec<ReconUnit> {
    let span = 1usize << level;
    let groups = (2 * depth) / span;
    (0..groups).map(|i| ReconUnit { level, start: i * span }).collect()
}

/// Levels 0..=`coarsest` with the diminishing-lr / growing-iteration
/// schedules filled in from the base values.
pub fn build_plan(
    depth: usize,
    coarsest: u32,
    lr0: f64,
    iter0: usize,
    input_policy: InputPolicy,
) -> Result<ReconPlan, ReconError> {
    let max = compute_g(depth)?;
    if coarsest > max {
        return Err(ReconError::LevelTooCoarse { requested: coarsest, max });
    }
    let mut levels = Vec::with_capacity(coarsest as usize + 1);
    for g in 0..=coarsest {
        levels.push(LevelPlan { level: g, units: tile_level(depth, g), lr: lr_for(g, lr0)?, iters: iter_for(g, iter0) });
    }
    Ok(ReconPlan { coarsest, levels, input_policy })
}

/// A plan with exactly one granularity level and a fixed per-unit budget
/// (the conventional fixed-granularity baseline when `level == 1`).
pub fn single_level_plan(
    depth: usize,
    level: u32,
    lr: f64,
    iters: usize,
    input_policy: InputPolicy,
) -> Result<ReconPlan, ReconError> {
    let max = compute_g(depth)?;
    if level > max {
        return Err(ReconError::LevelTooCoarse { requested: level, max });
    }
    Ok(ReconPlan {
        coarsest: level,
        levels: vec![LevelPlan { level, units: tile_level(depth, level), lr, iters }],
        input_policy,
    })
}

/// Applies the covered finest units in order under the model's current
/// quantization mode; returns the detached output.
pub fn unit_forward<S: Scalar>(model: &ModelState<S>, unit: &ReconUnit, x: &Tensor<S>) -> Tensor<S> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let out = unit_forward_on_tape(model, &mut tape, unit, xid, None).0;
    tape.detach(out)
}

pub fn unit_forward_on_tape<S: Scalar>(
    model: &ModelState<S>,
    tape: &mut Tape<S>,
    unit: &ReconUnit,
    x: TensorId,
    trainable: Option<&BTreeSet<String>>,
) -> (TensorId, Vec<(String, TensorId)>) {
    assert!(unit.start % unit.span() == 0, "unit start must align to its span");
    assert!(unit.start + unit.span() <= 2 * model.config.depth, "unit exceeds the network");
    let mut sess = model.session(trainable);
    let mut h = x;
    for u in unit.range() {
        h = sess.unit(tape, u, h);
    }
    (h, sess.bindings)
}

/// Union of the trainable sets of the covered finest units.
pub fn trainable_keys<S: Scalar>(model: &ModelState<S>, unit: &ReconUnit) -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    for u in unit.range() {
        keys.extend(model.trainable_keys_for_unit(u));
    }
    keys
}

/// MSE between the quantized unit on `x_q` and the frozen full-precision
/// unit on `x_fp`; the target carries no gradient.
pub fn recon_loss<S: Scalar>(
    unit: &ReconUnit,
    x_q: &Tensor<S>,
    x_fp: &Tensor<S>,
    model_q: &ModelState<S>,
    model_fp: &ModelState<S>,
) -> S {
    let target = unit_forward(model_fp, unit, x_fp);
    let out = unit_forward(model_q, unit, x_q);
    let mut tape = Tape::new();
    let a = tape.leaf(out);
    let b = tape.leaf(target);
    let l = tape.mse_loss(a, b);
    tape.scalar_value(l)
}

/// Per-unit loss trace recorded during reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCurve {
    pub level: u32,
    /// Position of the unit within its level, in network order.
    pub unit_index: usize,
    /// Finest-unit index where the unit begins.
    pub start: usize,
    pub losses: Vec<f64>,
}

/// Runs `iters` Adam steps minimizing the reconstruction MSE of one unit,
/// cycling minibatches from `recon_batches` (image batches). Unit inputs and
/// targets are recomputed here, at unit start, so updates from previously
/// reconstructed units are visible. Only the unit's trainable set changes.
/// Cosine annealing runs from `lr` to zero over `iters`.
pub fn reconstruct_unit<S: Scalar>(
    model_q: &mut ModelState<S>,
    model_fp: &ModelState<S>,
    unit: &ReconUnit,
    recon_batches: &[Tensor<S>],
    iters: usize,
    lr: f64,
    input_policy: InputPolicy,
) -> Result<Vec<f64>, ReconError> {
    if recon_batches.is_empty() {
        return Err(ReconError::NoData);
    }
    if iters < 1 {
        return Err(ReconError::NoIterations);
    }

    let pairs: Vec<(Tensor<S>, Tensor<S>)> = recon_batches
        .iter()
        .map(|imgs| {
            let x_fp = model_fp.forward_to_unit(imgs, unit.start);
            let target = unit_forward(model_fp, unit, &x_fp);
            let x_q = match input_policy {
                InputPolicy::QuantizedInput => model_q.forward_to_unit(imgs, unit.start),
                InputPolicy::FpInput => x_fp,
            };
            (x_q, target)
        })
        .collect();

    let trainable = trainable_keys(model_q, unit);
    let keys: Vec<String> = trainable.iter().cloned().collect();
    let lens: Vec<usize> = keys.iter().map(|k| model_q.trainable_slice_mut(k).len()).collect();
    let mut adam = Adam::new(&lens);
    let mut losses = Vec::with_capacity(iters);

    for it in 0..iters {
        let lr_t = cosine_lr(it, iters, lr);
        let (x, target) = &pairs[it % pairs.len()];
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let (out, bindings) = unit_forward_on_tape(model_q, &mut tape, unit, xid, Some(&trainable));
        let tid = tape.leaf(target.clone());
        let loss_id = tape.mse_loss(out, tid);
        let loss = tape.scalar_value(loss_id).to_f64();
        if !loss.is_finite() {
            return Err(ReconError::NanLoss { level: unit.level, start: unit.start, iteration: it });
        }
        losses.push(loss);
        tape.backward(loss_id);

        for (slot, key) in keys.iter().enumerate() {
            let id = bindings
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, id)| *id)
                .unwrap_or_else(|| panic!("trainable key {key} not bound in forward"));
            let grad = tape.grad(id).expect("gradient missing after backward").to_vec();
            adam.step(slot, model_q.trainable_slice_mut(key), &grad, lr_t);
        }
    }
    Ok(losses)
}

/// Full fine-to-coarse pass: levels from finest to coarsest, units in
/// network order within each level. Coarser levels start from the parameters
/// the finer levels produced.
pub fn pfcr_run<S: Scalar>(
    model_q: &mut ModelState<S>,
    model_fp: &ModelState<S>,
    recon_batches: &[Tensor<S>],
    plan: &ReconPlan,
) -> Result<Vec<UnitCurve>, ReconError> {
    let mut curves = Vec::new();
    for lvl in &plan.levels {
        for (unit_index, unit) in lvl.units.iter().enumerate() {
            let losses =
                reconstruct_unit(model_q, model_fp, unit, recon_batches, lvl.iters, lvl.lr, plan.input_policy)?;
            curves.push(UnitCurve { level: lvl.level, unit_index, start: unit.start, losses });
        }
    }
    Ok(curves)
}
