use super::report::RunConfig;
use super::run::{blockwise_matched_iters, quantize_run, PreparedData};
use super::train::evaluate_top1;
use super::HarnessError;
use crate::pos::{run_blockwise, Method, PosError};
use crate::vit::ModelState;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

/// Ablation arms: the quantization pipelines whose accuracy the comparison
/// table pairs against each other on a shared baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Fixed block granularity, one stage, budget-matched to `PfcrOnly`.
    Blockwise,
    /// Fine-to-coarse reconstruction, one stage.
    PfcrOnly,
    /// Two-stage strategy over fixed block granularity.
    PosOnly,
    /// Fine-to-coarse reconstruction inside the two-stage strategy.
    PfcrPos,
    /// Unquantized reference.
    FpBaseline,
}

impl Arm {
    pub fn parse(s: &str) -> Result<Arm, HarnessError> {
        match s {
            "blockwise" => Ok(Arm::Blockwise),
            "pfcr_only" | "pfcr" => Ok(Arm::PfcrOnly),
            "pos_only" | "pos" => Ok(Arm::PosOnly),
            "pfcr_pos" | "pfcr-pos" => Ok(Arm::PfcrPos),
            "fp_baseline" | "fp" => Ok(Arm::FpBaseline),
            other => Err(HarnessError::Config(format!("unknown ablation arm {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Blockwise => "blockwise",
            Arm::PfcrOnly => "pfcr_only",
            Arm::PosOnly => "pos_only",
            Arm::PfcrPos => "pfcr_pos",
            Arm::FpBaseline => "fp_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    /// `None` marks a per-arm summary row.
    pub seed: Option<u64>,
    pub accuracy: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Fingerprint of the shared baseline every arm ran against.
    pub baseline_fingerprint: u64,
}

impl AblationTable {
    pub fn median_for(&self, arm: Arm) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.arm == arm.name() && r.seed.is_none())
            .and_then(|r| r.accuracy)
    }

    /// Final losses of the level-`level` unit at `unit_index`, one entry per
    /// successful seed of the arm.
    pub fn is_complete(&self, arms: usize, seeds: usize) -> bool {
        self.rows.len() == arms * seeds + arms
    }
}

pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        Some(values[n / 2])
    } else {
        Some((values[n / 2 - 1] + values[n / 2]) / 2.0)
    }
}

fn arm_config(base: &RunConfig, arm: Arm, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.sampling.seed = seed;
    cfg.quant.seed = seed;
    cfg.method = match arm {
        Arm::Blockwise | Arm::PosOnly => Method::Blockwise,
        Arm::PfcrOnly => Method::Pfcr,
        Arm::PfcrPos | Arm::FpBaseline => Method::PfcrPos,
    };
    cfg.quant.stage1_enabled = matches!(arm, Arm::PfcrPos | Arm::PosOnly);
    cfg
}

fn run_arm(
    base: &RunConfig,
    arm: Arm,
    seed: u64,
    baseline: &ModelState<f32>,
    data: &PreparedData,
) -> (Option<f64>, String, Option<crate::pos::StageCurves>) {
    let cfg = arm_config(base, arm, seed);
    match arm {
        Arm::FpBaseline => (Some(evaluate_top1(baseline, &data.eval)), "ok".into(), None),
        Arm::PosOnly => {
            // Two-stage strategy over the block-wise plan; per-stage budget
            // equals the matched block-wise budget.
            let iters = match blockwise_matched_iters(&cfg) {
                Ok(v) => v,
                Err(e) => return (None, format!("failed: {e}"), None),
            };
            let pos_cfg = cfg.quant.to_pos_config(true);
            let n_recon = cfg
                .sampling
                .n_recon
                .unwrap_or_else(|| super::dataset::default_recon_count(data.train.len()));
            let sampled = super::dataset::sample_calibration(&data.train, cfg.sampling.n_calib, n_recon, cfg.sampling.seed);
            let (calib, recon) = match sampled {
                Ok(v) => v,
                Err(e) => return (None, format!("failed: {e}"), None),
            };
            let calib_batches = super::dataset::image_batches(&calib, cfg.recon_batch);
            let recon_batches = super::run::recon_image_batches(&recon, cfg.recon_batch, cfg.quant.seed);
            match run_blockwise(baseline, &calib_batches, &recon_batches, &pos_cfg, iters, true) {
                Ok(out) => (Some(evaluate_top1(&out.model, &data.eval)), "ok".into(), None),
                Err(PosError::Stage { stage, source, .. }) => (None, format!("failed in {stage}: {source}"), None),
                Err(e) => (None, format!("failed: {e}"), None),
            }
        }
        _ => match quantize_run(&cfg, baseline, data, vec![]) {
            Ok(out) => {
                let status = match &out.report.failed_stage {
                    None => "ok".to_string(),
                    Some(stage) => format!("failed in {stage}"),
                };
                let last_stage = out.report.stages.last().cloned();
                (out.report.quantized_accuracy, status, last_stage)
            }
            Err(e) => (None, format!("failed: {e}"), None),
        },
    }
}

/// Runs every arm for every seed against one shared baseline and calibration
/// protocol, then appends per-arm median summary rows. Failures keep their
/// row with a failure flag. `jobs > 1` runs arm-seed combinations on worker
/// threads; output order is independent of scheduling.
pub fn run_ablation_suite(
    base: &RunConfig,
    baseline: &ModelState<f32>,
    data: &PreparedData,
    arms: &[Arm],
    seeds: &[u64],
    jobs: usize,
) -> AblationTable {
    assert!(!seeds.is_empty(), "need at least one seed");
    let tasks: Vec<(usize, Arm, u64)> = arms
        .iter()
        .flat_map(|&arm| seeds.iter().map(move |&s| (arm, s)))
        .enumerate()
        .map(|(i, (a, s))| (i, a, s))
        .collect();

    let results: Vec<Option<(Option<f64>, String)>> = if jobs <= 1 {
        tasks.iter().map(|&(_, arm, seed)| Some(strip(run_arm(base, arm, seed, baseline, data)))).collect()
    } else {
        let queue = Mutex::new(tasks.iter().copied().collect::<VecDeque<_>>());
        let results = Mutex::new(vec![None; tasks.len()]);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let task = queue.lock().unwrap().pop_front();
                    let Some((i, arm, seed)) = task else { break };
                    let out = strip(run_arm(base, arm, seed, baseline, data));
                    results.lock().unwrap()[i] = Some(out);
                });
            }
        });
        results.into_inner().unwrap()
    };

    let mut rows = Vec::new();
    for (i, &(_, arm, seed)) in tasks.iter().enumerate() {
        let (accuracy, status) = results[i].clone().expect("worker completed");
        rows.push(AblationRow { arm: arm.name().into(), seed: Some(seed), accuracy, status });
    }
    for &arm in arms {
        let mut accs: Vec<f64> =
            rows.iter().filter(|r| r.arm == arm.name() && r.seed.is_some()).filter_map(|r| r.accuracy).collect();
        let ok = accs.len();
        rows.push(AblationRow {
            arm: arm.name().into(),
            seed: None,
            accuracy: median(&mut accs),
            status: format!("median over {ok}/{} seeds", seeds.len()),
        });
    }
    AblationTable { rows, baseline_fingerprint: baseline.fingerprint() }
}

fn strip(r: (Option<f64>, String, Option<crate::pos::StageCurves>)) -> (Option<f64>, String) {
    (r.0, r.1)
}

/// `arm,seed,accuracy,status` rows; summary rows carry an empty seed.
pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
    w.write_record(["arm", "seed", "accuracy", "status"])
        .map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
    for row in &table.rows {
        w.write_record([
            row.arm.as_str(),
            &row.seed.map(|s| s.to_string()).unwrap_or_default(),
            &row.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            &row.status,
        ])
        .map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}
