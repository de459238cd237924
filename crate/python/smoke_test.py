#!/usr/bin/env python3
"""Smoke test for the pfcr_py extension module.

Builds nothing itself: expects `cargo build --release -p pfcr-py` to have
produced target/release/libpfcr_py.so. Copies the cdylib next to a temp
directory under the importable name and exercises the bound surface.
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_pfcr_py():
    candidates = [
        REPO / "target" / "release" / "libpfcr_py.so",
        REPO / "target" / "debug" / "libpfcr_py.so",
    ]
    src = next((p for p in candidates if p.exists()), None)
    if src is None:
        sys.exit("libpfcr_py.so not found; run `cargo build --release -p pfcr-py` first")
    stage = Path(tempfile.mkdtemp(prefix="pfcr_py_"))
    shutil.copy(src, stage / "pfcr_py.so")
    sys.path.insert(0, str(stage))
    import pfcr_py

    return pfcr_py


def main():
    m = import_pfcr_py()

    # schedule and granularity arithmetic
    assert m.compute_g(12) == 3
    assert m.compute_g(8) == 4
    assert m.compute_g(1) == 1
    assert math.isclose(m.lr_for(2, 4e-5), 2.4e-5, rel_tol=1e-12)
    assert m.iter_for(3, 800) == 1280
    try:
        m.lr_for(5, 4e-5)
        raise AssertionError("lr_for(5, ...) should raise")
    except ValueError:
        pass
    assert m.cosine_lr(0, 100, 1e-3) == 1e-3
    assert abs(m.cosine_lr(100, 100, 1e-3)) < 1e-18

    # uniform quantizer round trip
    q = m.PyQuantizer.calibrate_uniform([0.0, 15.0], 4)
    assert q.scale == 1.0 and q.zero_point == 0.0
    assert q.quantize([0.6, 100.0]) == [1.0, 15.0]
    assert q.dequantize([2.0]) == [2.0]
    fq = q.fake_quant([3.4, 7.6])
    assert fq == [3.0, 8.0], fq

    # log2 quantizer
    lq = m.PyQuantizer.calibrate_log2([1.0, 0.25, 0.03], 4)
    assert lq.scale == 1.0
    assert lq.quantize([0.25]) == [2.0]
    assert lq.dequantize([2.0]) == [0.25]

    # synthetic dataset determinism
    imgs_a, shape, labels = m.synthetic_dataset(4, 32, 8, 3)
    imgs_b, _, labels_b = m.synthetic_dataset(4, 32, 8, 3)
    assert shape == [32, 1, 8, 8]
    assert imgs_a == imgs_b and labels == labels_b
    assert all(0.0 <= v <= 1.0 for v in imgs_a)

    # end-to-end: train a tiny baseline, quantize it, read the report
    out = tempfile.mkdtemp(prefix="pfcr_smoke_")
    config = {
        "model": {
            "depth": 2,
            "embed_dim": 16,
            "heads": 2,
            "patch_size": 4,
            "image_size": 8,
            "in_channels": 1,
            "mlp_ratio": 2.0,
            "num_classes": 3,
        },
        "dataset": {
            "kind": "synthetic",
            "num_classes": 3,
            "n_train": 96,
            "n_eval": 48,
            "image_size": 8,
            "seed": 5,
            "noise": 0.1,
        },
        "baseline": {"checkpoint": None, "epochs": 2, "lr": 2e-3, "batch": 32, "seed": 1},
        "sampling": {"n_calib": 8, "n_recon": 16, "seed": 2},
        "quant": {
            "bits": 3,
            "weight_bits": None,
            "act_bits": None,
            "lr0": 1e-3,
            "iter0": 2,
            "seed": 3,
        },
        "method": "pfcr-pos",
        "recon_batch": 8,
    }
    cfg_json = json.dumps(config)
    baseline_acc = m.train_baseline_to(cfg_json, out)
    assert 0.0 <= baseline_acc <= 1.0
    report = json.loads(m.quantize_to(cfg_json, out))
    assert report["failed_stage"] is None
    assert [s["name"] for s in report["stages"]] == ["stage1", "stage2"]
    assert 0.0 <= report["quantized_accuracy"] <= 1.0
    assert (Path(out) / "quantized.manifest.json").exists()
    assert (Path(out) / "curves.csv").exists()

    q_acc = m.evaluate_checkpoint(cfg_json, str(Path(out) / "quantized"))
    assert abs(q_acc - report["quantized_accuracy"]) < 1e-12

    print("smoke test passed:")
    print(f"  baseline top-1 {baseline_acc:.4f}, quantized top-1 {q_acc:.4f}")
    print(f"  artifacts in {out}")


if __name__ == "__main__":
    main()
