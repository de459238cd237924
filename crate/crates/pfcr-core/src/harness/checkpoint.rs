use super::HarnessError;
use crate::quant::{QuantParams, QuantSpec, Quantizer};
use crate::tensor::Tensor;
use crate::vit::{ModelState, ViTConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const MAGIC: &str = "pfcr.ckpt";
const VERSION: u32 = 1;

/// `<base>.manifest.json` + `<base>.weights.bin`: JSON manifest with tensor
/// layout, quantizer parameters, and a whole-file CRC32 of the little-endian
/// f32 blob.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    version: u32,
    crc32: u32,
    config: ViTConfig,
    weight_quant_enabled: bool,
    act_quant_enabled: bool,
    tensors: Vec<TensorEntry>,
    weight_quantizers: BTreeMap<String, QuantEntry>,
    act_quantizers: BTreeMap<String, QuantEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the weights blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantEntry {
    spec: QuantSpec,
    scale: Vec<f32>,
    zero_point: Vec<f32>,
}

impl QuantEntry {
    fn from_quantizer(q: &Quantizer<f32>) -> Self {
        QuantEntry { spec: q.spec, scale: q.params.scale.clone(), zero_point: q.params.zero_point.clone() }
    }

    fn into_quantizer(self) -> Quantizer<f32> {
        Quantizer {
            spec: self.spec,
            params: QuantParams { scale: self.scale, zero_point: self.zero_point, bits: self.spec.bits },
        }
    }
}

pub fn manifest_path(base: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest.json", base.display()))
}

pub fn weights_path(base: &Path) -> PathBuf {
    PathBuf::from(format!("{}.weights.bin", base.display()))
}

pub fn save_checkpoint(model: &ModelState<f32>, base: &Path) -> Result<(), HarnessError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut weight_quantizers = BTreeMap::new();
    for (name, p) in model.params() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.tensor.shape.clone(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
            len: p.tensor.numel() as u64,
        });
        for &v in &p.tensor.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(q) = &p.quant {
            weight_quantizers.insert(name.clone(), QuantEntry::from_quantizer(q));
        }
    }
    let act_quantizers =
        model.act_quantizers().map(|(pt, q)| (pt.clone(), QuantEntry::from_quantizer(q))).collect();

    let manifest = Manifest {
        magic: MAGIC.into(),
        version: VERSION,
        crc32: crc32fast::hash(&blob),
        config: model.config.clone(),
        weight_quant_enabled: model.weight_quant_enabled,
        act_quant_enabled: model.act_quant_enabled,
        tensors,
        weight_quantizers,
        act_quantizers,
    };

    let mp = manifest_path(base);
    if let Some(dir) = mp.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
    }
    std::fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| HarnessError::io(&mp, e))?;
    let wp = weights_path(base);
    std::fs::write(&wp, &blob).map_err(|e| HarnessError::io(&wp, e))?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<ModelState<f32>, HarnessError> {
    let mp = manifest_path(base);
    let manifest_bytes = std::fs::read(&mp).map_err(|e| HarnessError::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.magic != MAGIC {
        return Err(HarnessError::Checkpoint(format!("bad magic {:?} in {}", manifest.magic, mp.display())));
    }
    if manifest.version != VERSION {
        return Err(HarnessError::Checkpoint(format!(
            "unsupported version {} in {}",
            manifest.version,
            mp.display()
        )));
    }
    let wp = weights_path(base);
    let blob = std::fs::read(&wp).map_err(|e| HarnessError::io(&wp, e))?;
    let crc = crc32fast::hash(&blob);
    if crc != manifest.crc32 {
        return Err(HarnessError::Checkpoint(format!(
            "checksum mismatch in {}: manifest {:#010x}, blob {:#010x}",
            wp.display(),
            manifest.crc32,
            crc
        )));
    }

    let mut model = ModelState::<f32>::init(&manifest.config, 0)?;
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        let slice = blob.get(start..end).ok_or_else(|| {
            HarnessError::Checkpoint(format!("tensor {} extends past blob end", entry.name))
        })?;
        let data: Vec<f32> =
            slice.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        model.set_param_tensor(&entry.name, Tensor::new(entry.shape.clone(), data));
    }
    for (name, entry) in manifest.weight_quantizers {
        model.set_weight_quantizer(&name, Some(entry.into_quantizer()));
    }
    for (point, entry) in manifest.act_quantizers {
        model.set_act_quantizer(point, entry.into_quantizer());
    }
    model.weight_quant_enabled = manifest.weight_quant_enabled;
    model.act_quant_enabled = manifest.act_quant_enabled;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::make_synthetic;

    fn cfg() -> ViTConfig {
        ViTConfig {
            depth: 2,
            embed_dim: 8,
            heads: 2,
            patch_size: 4,
            image_size: 8,
            in_channels: 1,
            mlp_ratio: 2.0,
            num_classes: 3,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact_including_quantizers() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let mut m = ModelState::<f32>::init(&cfg(), 77).unwrap();
        let ds = make_synthetic(3, 8, 8, 1, 0.2);
        m.attach_quantizers(3, 4, &[ds.images.clone()]).unwrap();
        m.weight_quant_enabled = true;
        save_checkpoint(&m, &base).unwrap();
        let loaded = load_checkpoint(&base).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let m = ModelState::<f32>::init(&cfg(), 7).unwrap();
        save_checkpoint(&m, &base).unwrap();
        let wp = weights_path(&base);
        let mut blob = std::fs::read(&wp).unwrap();
        blob[40] ^= 0xff;
        std::fs::write(&wp, blob).unwrap();
        match load_checkpoint(&base) {
            Err(HarnessError::Checkpoint(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn manifest_lists_scales_zero_points_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let mut m = ModelState::<f32>::init(&cfg(), 7).unwrap();
        let ds = make_synthetic(3, 8, 8, 1, 0.2);
        m.attach_quantizers(3, 3, &[ds.images.clone()]).unwrap();
        save_checkpoint(&m, &base).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(manifest_path(&base)).unwrap()).unwrap();
        let wq = &manifest["weight_quantizers"]["blocks.00.attn.wq"];
        assert_eq!(wq["spec"]["bits"], 3);
        assert!(wq["scale"].as_array().unwrap().len() == 8);
        assert!(wq["zero_point"].as_array().is_some());
        let aq = &manifest["act_quantizers"]["blocks.00.attn.probs"];
        assert_eq!(aq["spec"]["scheme"], "log2");
    }

    #[test]
    fn bad_magic_in_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model");
        let m = ModelState::<f32>::init(&cfg(), 7).unwrap();
        save_checkpoint(&m, &base).unwrap();
        let mp = manifest_path(&base);
        let txt = std::fs::read_to_string(&mp).unwrap().replace("pfcr.ckpt", "not.a.ckpt");
        std::fs::write(&mp, txt).unwrap();
        assert!(matches!(load_checkpoint(&base), Err(HarnessError::Checkpoint(_))));
    }
}
