"""Binary-weight network toolkit.

Converts the Conv/FullyConnected weights of a small CNN into -1/+1 codes
with one real scale per output channel, layer by layer, by minimizing the
inner-product reconstruction error against the float model. Includes a
desk-scale numpy net engine (training, fine-tuning, evaluation), exhaustive
oracles, and a CLI.
"""

from .binarizer import (
    BinarySolution,
    HashProblem,
    SolverConfig,
    dcc_sweep,
    init_codes,
    init_scale,
    objective,
    solve_column,
    solve_layer,
    update_scale,
)
from .data import Dataset, load_dataset, save_dataset, synthetic_digits
from .estimator import ScaledSignApproximator
from .manifest import LayerSpec, ManifestError, ModelManifest, read_manifest, write_manifest
from .net import (
    BINARY,
    FLOAT,
    MIXED,
    Network,
    TrainConfig,
    evaluate,
    finetune,
    forward,
    grad_check,
    train_baseline,
)
from .pipeline import (
    BinarizeRun,
    PipelineConfig,
    binarize_model,
    binarize_network,
    compute_target_similarity,
    extract_layer_inputs,
    sample_batch,
)
from .tensorio import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "BINARY",
    "BinarySolution",
    "BinarizeRun",
    "Dataset",
    "FLOAT",
    "HashProblem",
    "LayerSpec",
    "MIXED",
    "ManifestError",
    "ModelManifest",
    "Network",
    "PipelineConfig",
    "ScaledSignApproximator",
    "SolverConfig",
    "TrainConfig",
    "binarize_model",
    "binarize_network",
    "compute_target_similarity",
    "dcc_sweep",
    "evaluate",
    "extract_layer_inputs",
    "finetune",
    "forward",
    "grad_check",
    "init_codes",
    "init_scale",
    "load_dataset",
    "objective",
    "read_manifest",
    "read_tensor",
    "sample_batch",
    "save_dataset",
    "solve_column",
    "solve_layer",
    "synthetic_digits",
    "train_baseline",
    "update_scale",
    "write_manifest",
    "write_tensor",
]
