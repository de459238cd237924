use super::HarnessError;
use crate::pos::{Method, PosConfig, StageCurves};
use crate::recon::InputPolicy;
use crate::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Single run-configuration document: model, data source, baseline training,
/// sampling, quantization, and method selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub dataset: DatasetConfig,
    pub baseline: BaselineConfig,
    pub sampling: SamplingConfig,
    pub quant: QuantSettings,
    pub method: Method,
    #[serde(default = "default_recon_batch")]
    pub recon_batch: usize,
}

fn default_recon_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        num_classes: usize,
        n_train: usize,
        n_eval: usize,
        image_size: usize,
        seed: u64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Checkpoint path base consumed by `quantize`, produced by
    /// `train-baseline`.
    pub checkpoint: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    #[serde(default = "default_n_calib")]
    pub n_calib: usize,
    /// Reconstruction sample count; defaults to `min(1024, n/4)`.
    pub n_recon: Option<usize>,
    pub seed: u64,
}

fn default_n_calib() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub bits: u32,
    /// Asymmetric overrides; `None` follows `bits`.
    pub weight_bits: Option<u32>,
    pub act_bits: Option<u32>,
    pub lr0: f64,
    /// Base iteration budget; defaults by bit-width (800/300/100 for 3/4/6).
    pub iter0: Option<usize>,
    #[serde(default = "default_true")]
    pub stage1_enabled: bool,
    #[serde(default = "default_policy")]
    pub input_policy: InputPolicy,
    pub seed: u64,
    #[serde(default)]
    pub recalibrate_acts_stage2: bool,
}

fn default_true() -> bool {
    true
}

fn default_policy() -> InputPolicy {
    InputPolicy::QuantizedInput
}

impl QuantSettings {
    pub fn iter0(&self) -> usize {
        self.iter0.unwrap_or_else(|| PosConfig::default_iter0(self.bits))
    }

    pub fn to_pos_config(&self, stage1_enabled: bool) -> PosConfig {
        PosConfig {
            bits: self.bits,
            lr0: self.lr0,
            iter0: self.iter0(),
            stage1_enabled,
            input_policy: self.input_policy,
            seed: self.seed,
            recalibrate_acts_stage2: self.recalibrate_acts_stage2,
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
        }
    }
}

/// Serialized record of one quantization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Effective configuration, overrides already applied; re-running from
    /// this echo reproduces the run bit-exactly.
    pub config: RunConfig,
    /// CLI override provenance, verbatim.
    pub overrides: Vec<String>,
    pub baseline_accuracy: f64,
    pub quantized_accuracy: Option<f64>,
    pub stages: Vec<StageCurves>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunReport {
    /// Everything replay must reproduce bit-exactly (wall-clock excluded).
    pub fn replay_key(&self) -> (Option<u64>, Vec<(String, Vec<Vec<u64>>)>) {
        let acc = self.quantized_accuracy.map(f64::to_bits);
        let curves = self
            .stages
            .iter()
            .map(|s| {
                (s.name.clone(), s.curves.iter().map(|c| c.losses.iter().map(|l| l.to_bits()).collect()).collect())
            })
            .collect();
        (acc, curves)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunReport, HarnessError> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// `stage,level,unit,iteration,loss` rows for every recorded curve.
pub fn write_curves_csv(path: &Path, stages: &[StageCurves]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
    w.write_record(["stage", "level", "unit", "iteration", "loss"])
        .map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
    for stage in stages {
        for curve in &stage.curves {
            for (it, loss) in curve.losses.iter().enumerate() {
                w.write_record([
                    stage.name.as_str(),
                    &curve.level.to_string(),
                    &curve.unit_index.to_string(),
                    &it.to_string(),
                    &loss.to_string(),
                ])
                .map_err(|e| HarnessError::Checkpoint(format!("csv: {e}")))?;
            }
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::UnitCurve;

    fn sample_config() -> RunConfig {
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
            dataset: DatasetConfig::Synthetic { num_classes: 3, n_train: 64, n_eval: 32, image_size: 8, seed: 5, noise: 0.25 },
            baseline: BaselineConfig { checkpoint: None, epochs: 2, lr: 1e-3, batch: 16, seed: 1 },
            sampling: SamplingConfig { n_calib: 8, n_recon: Some(16), seed: 2 },
            quant: QuantSettings {
                bits: 3,
                weight_bits: None,
                act_bits: None,
                lr0: 1e-3,
                iter0: Some(4),
                stage1_enabled: true,
                input_policy: InputPolicy::QuantizedInput,
                seed: 3,
                recalibrate_acts_stage2: false,
            },
            method: Method::PfcrPos,
            recon_batch: 8,
        }
    }

    #[test]
    fn report_roundtrips_losslessly() {
        let report = RunReport {
            config: sample_config(),
            overrides: vec!["--bits 3".into()],
            baseline_accuracy: 0.9712345678901234,
            quantized_accuracy: Some(0.8134567890123456),
            stages: vec![StageCurves {
                name: "stage1".into(),
                wall_clock_s: 1.2345678901234567,
                curves: vec![UnitCurve { level: 0, unit_index: 1, start: 1, losses: vec![0.5, 0.25, 0.12509871234] }],
            }],
            failed_stage: None,
            error: None,
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn config_defaults_fill_in() {
        let json = r#"{
            "model": {"depth":2,"embed_dim":8,"heads":2,"patch_size":4,"image_size":8,"in_channels":1,"mlp_ratio":2.0,"num_classes":3},
            "dataset": {"kind":"synthetic","num_classes":3,"n_train":64,"n_eval":32,"image_size":8,"seed":5},
            "baseline": {"checkpoint":null,"epochs":2,"lr":0.001,"batch":16,"seed":1},
            "sampling": {"seed":2,"n_recon":null},
            "quant": {"bits":3,"weight_bits":null,"act_bits":null,"lr0":0.001,"iter0":null,"seed":3},
            "method": "pfcr-pos"
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.recon_batch, 32);
        assert_eq!(cfg.sampling.n_calib, 64);
        assert!(cfg.quant.stage1_enabled);
        assert_eq!(cfg.quant.iter0(), 800);
        assert_eq!(cfg.quant.input_policy, InputPolicy::QuantizedInput);
        match cfg.dataset {
            DatasetConfig::Synthetic { noise, .. } => assert_eq!(noise, 0.25),
            _ => panic!(),
        }
    }

    #[test]
    fn curves_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let stages = vec![StageCurves {
            name: "stage2".into(),
            wall_clock_s: 0.0,
            curves: vec![UnitCurve { level: 1, unit_index: 3, start: 6, losses: vec![0.75, 0.5] }],
        }];
        write_curves_csv(&path, &stages).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "stage,level,unit,iteration,loss");
        assert_eq!(lines[1], "stage2,1,3,0,0.75");
        assert_eq!(lines[2], "stage2,1,3,1,0.5");
    }
}
