"""Helpers for driving the TypeScript exporter from the Python suite."""

import json
import shutil
import subprocess
from pathlib import Path

import numpy as np

EXPORTER_DIR = Path(__file__).resolve().parent.parent / "exporter"
EXPORT_JS = EXPORTER_DIR / "dist" / "export.js"


def exporter_available() -> bool:
    return EXPORT_JS.is_file() and shutil.which("node") is not None


def run_exporter(model_json: Path, out_dir: Path, name: str = "model"):
    return subprocess.run(
        ["node", str(EXPORT_JS), "--in", str(model_json), "--out", str(out_dir),
         "--name", name],
        capture_output=True, text=True)


def write_tfjs_model(out_dir: Path, layers: list[dict],
                     weights: list[tuple[str, np.ndarray]]) -> Path:
    """Write a minimal TensorFlow.js layers-model artifact (model.json + shard)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "modelTopology": {
            "model_config": {
                "class_name": "Sequential",
                "config": {"name": "seq", "layers": layers},
            },
        },
        "weightsManifest": [{
            "paths": ["weights.bin"],
            "weights": [
                {"name": name, "shape": list(arr.shape), "dtype": "float32"}
                for name, arr in weights
            ],
        }],
    }
    (out_dir / "model.json").write_text(json.dumps(doc), encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes()
                    for _, arr in weights)
    (out_dir / "weights.bin").write_bytes(blob)
    return out_dir / "model.json"


def toy3_model(out_dir: Path, seed: int = 0):
    """A 3-weight-layer toy model: conv, batchnorm, pool, conv, dense head."""
    rng = np.random.default_rng(seed)
    conv1 = rng.normal(size=(3, 3, 1, 2)).astype(np.float32)
    conv2 = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
    dense = rng.normal(size=(48, 4)).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, size=2).astype(np.float32)
    beta = rng.normal(size=2).astype(np.float32)
    mean = rng.normal(size=2).astype(np.float32)
    var = rng.uniform(0.5, 1.5, size=2).astype(np.float32)
    layers = [
        {"class_name": "Conv2D", "config": {
            "name": "conv1", "filters": 2, "kernel_size": [3, 3], "strides": [1, 1],
            "padding": "same", "use_bias": False, "activation": "relu",
            "batch_input_shape": [None, 8, 8, 1]}},
        {"class_name": "BatchNormalization", "config": {"name": "bn1", "epsilon": 1e-5}},
        {"class_name": "MaxPooling2D", "config": {
            "name": "mp1", "pool_size": [2, 2], "strides": [2, 2]}},
        {"class_name": "Conv2D", "config": {
            "name": "conv2", "filters": 3, "kernel_size": [3, 3], "strides": [1, 1],
            "padding": "same", "use_bias": False, "activation": "relu"}},
        {"class_name": "Flatten", "config": {"name": "flat"}},
        {"class_name": "Dense", "config": {
            "name": "fc1", "units": 4, "use_bias": False, "activation": "softmax"}},
    ]
    weights = [
        ("conv1/kernel", conv1),
        ("bn1/gamma", gamma), ("bn1/beta", beta),
        ("bn1/moving_mean", mean), ("bn1/moving_variance", var),
        ("conv2/kernel", conv2),
        ("fc1/kernel", dense),
    ]
    model_json = write_tfjs_model(out_dir, layers, weights)
    return model_json, dict(weights)
