"""Layer-by-layer model binarization with error adaptation.

Each weight layer is solved in order: featuremaps are collected from both
the original float model (targets) and the partially converted model
(reconstruction inputs), so later layers compensate the quantization error
introduced upstream. Conv inputs are unfolded to patch columns, so a layer's
problem is always a plain (s x m, m x n) matrix pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .binarizer import (
    BinarySolution,
    HashProblem,
    SolverConfig,
    initialization_objective,
    layer_objective,
    solve_layer,
)
from .data import Dataset
from .manifest import ModelManifest
from .net import MIXED, ConvLayer, FCLayer, Network, im2col

TARGET_FULL_PRECISION = "full_precision"
TARGET_BINARIZED = "binarized"


@dataclass
class PipelineConfig:
    batch_size: int = 256
    col_cap: int = 8192
    skip_first: bool = False
    skip_last: bool = False
    target_from: str = TARGET_FULL_PRECISION
    adaptive: bool = True
    layers: list[int] | None = None  # explicit manifest indices; overrides skips
    fixed_scale: float | None = None
    threads: int = 1
    seed: int = 42
    solver: SolverConfig = field(default_factory=SolverConfig)

    def validate(self) -> None:
        if self.batch_size < 1 or self.col_cap < 1:
            raise ValueError("batch_size and col_cap must be positive")
        if self.target_from not in (TARGET_FULL_PRECISION, TARGET_BINARIZED):
            raise ValueError(f"unknown target_from {self.target_from!r}")
        self.solver.validate()


@dataclass
class LayerReport:
    index: int
    name: str
    s_dim: int
    m_cols: int
    n_cols: int
    objective_initial: float
    objective_final: float
    alpha_min: float
    alpha_max: float
    alpha_mean: float
    flagged_columns: list[int]
    iterations: int


@dataclass
class BinarizeRun:
    source_manifest: ModelManifest | None
    target_manifest: ModelManifest | None
    source_net: Network
    target_net: Network
    batch: np.ndarray | None = None
    layer_reports: list[LayerReport] = field(default_factory=list)


class BinarizeError(Exception):
    """Carries the partial run so completed layer reports survive a failure."""

    def __init__(self, run: BinarizeRun, layer_index: int, cause: Exception):
        self.run = run
        self.layer_index = layer_index
        self.cause = cause
        super().__init__(f"binarization failed at layer {layer_index}: {cause}")


def sample_batch(dataset: Dataset, batch_size: int, seed: int) -> np.ndarray:
    """A seeded shuffle of the dataset, truncated to batch_size images."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.images[perm[: min(batch_size, n)]]


def _layer_input_matrix(network: Network, batch: np.ndarray, layer_index: int,
                        mode: str = MIXED) -> np.ndarray:
    layer = network.layers[layer_index]
    if not isinstance(layer, (ConvLayer, FCLayer)):
        raise ValueError(f"layer {layer_index} is {layer.spec.kind}, not a weight layer")
    features, _ = network.forward(batch, mode=mode, upto=layer_index)
    x = features[-1] if features else np.asarray(batch, dtype=np.float64)
    if isinstance(layer, ConvLayer):
        kh, kw = layer.spec.kernel
        return im2col(x, kh, kw, layer.spec.stride, layer.spec.pad)
    return x.reshape(x.shape[0], -1).T


def extract_layer_inputs(manifest: ModelManifest, batch: np.ndarray, layer_index: int,
                         mode: str = MIXED) -> np.ndarray:
    """Input featuremaps of one weight layer as an (s, m) matrix.

    Conv inputs are already unfolded (s = c*kh*kw, m = batch*oh*ow); layers
    earlier in the manifest execute according to their binarized flags.
    """
    return _layer_input_matrix(Network.from_manifest(manifest), batch, layer_index, mode)


def compute_target_similarity(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Inner products between featuremap columns and weight columns: X^T W."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[0] != w.shape[0]:
        raise ValueError(f"x has {x.shape[0]} rows, w has {w.shape[0]}")
    return x.T @ w


def _problem_weights(layer: ConvLayer | FCLayer) -> np.ndarray:
    return layer.weight.reshape(layer.weight.shape[0], -1).T  # (s, n)


def _assign_solution(layer: ConvLayer | FCLayer, solution: BinarySolution) -> None:
    layer.codes = solution.codes.T.reshape(layer.weight.shape).astype(np.int8)
    layer.scales = solution.scales.copy()
    layer.spec.binarized = True
    # refs are filled in when the network is persisted
    layer.spec.binary_ref = layer.spec.binary_ref or f"{layer.spec.name}.b.bwt"
    layer.spec.scale_ref = layer.spec.scale_ref or f"{layer.spec.name}.a.bwt"


def solve_layer_adaptive(run: BinarizeRun, layer_index: int, cfg: PipelineConfig,
                         dataset: Dataset) -> BinarySolution:
    """Solve one weight layer against the partially binarized model's inputs.

    Targets come from the full-precision path (or the binarized path when
    ``cfg.target_from`` says so); reconstruction featuremaps come from the
    binarized path unless ``cfg.adaptive`` is off. The solved codes and
    scales are installed into the run's target network.
    """
    cfg.validate()
    layer = run.target_net.layers[layer_index]
    if not isinstance(layer, (ConvLayer, FCLayer)):
        raise ValueError(f"layer {layer_index} is not a weight layer")

    batch = sample_batch(dataset, cfg.batch_size, np.random.default_rng(
        [cfg.seed, layer_index]).integers(0, 2**31))
    run.batch = batch
    x_full = _layer_input_matrix(run.source_net, batch, layer_index, mode=MIXED)
    if cfg.adaptive:
        x_tilde = _layer_input_matrix(run.target_net, batch, layer_index, mode=MIXED)
    else:
        x_tilde = x_full

    m = x_full.shape[1]
    if m > cfg.col_cap:
        idx = np.random.default_rng([cfg.seed, layer_index, 1]).choice(
            m, size=cfg.col_cap, replace=False)
        idx.sort()
        x_full = x_full[:, idx]
        x_tilde = x_tilde[:, idx]

    w = _problem_weights(layer)
    x_target = x_full if cfg.target_from == TARGET_FULL_PRECISION else x_tilde
    problem = HashProblem(
        x_tilde=x_tilde,
        s_target=compute_target_similarity(x_target, w),
        w=w,
    )
    solution = solve_layer(problem, cfg.solver, fixed_scale=cfg.fixed_scale,
                           threads=cfg.threads)
    _assign_solution(layer, solution)

    run.layer_reports.append(LayerReport(
        index=layer_index,
        name=layer.spec.name,
        s_dim=problem.x_tilde.shape[0],
        m_cols=problem.x_tilde.shape[1],
        n_cols=solution.n_columns,
        objective_initial=initialization_objective(problem),
        objective_final=layer_objective(problem, solution.codes, solution.scales),
        alpha_min=float(solution.scales.min()),
        alpha_max=float(solution.scales.max()),
        alpha_mean=float(solution.scales.mean()),
        flagged_columns=solution.flagged_columns,
        iterations=max((len(t) for t in solution.traces), default=0),
    ))
    return solution


def select_layers(net_or_manifest, cfg: PipelineConfig) -> list[int]:
    """Manifest indices of the weight layers the run will binarize, in order."""
    if isinstance(net_or_manifest, Network):
        indices = [i for i, _ in net_or_manifest.weight_layers()]
    else:
        indices = net_or_manifest.weight_layer_indices()
    if cfg.layers is not None:
        chosen = [i for i in indices if i in set(cfg.layers)]
        if len(chosen) != len(cfg.layers):
            raise ValueError(f"cfg.layers {cfg.layers} includes non-weight layers")
        return chosen
    if cfg.skip_first and indices:
        indices = indices[1:]
    if cfg.skip_last and indices:
        indices = indices[:-1]
    return indices


def binarize_network(source_net: Network, dataset: Dataset,
                     cfg: PipelineConfig | None = None) -> BinarizeRun:
    """Binarize the selected weight layers of an in-memory network, in order."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    run = BinarizeRun(
        source_manifest=None,
        target_manifest=None,
        source_net=source_net,
        target_net=source_net.clone(),
    )
    for layer_index in select_layers(source_net, cfg):
        try:
            solve_layer_adaptive(run, layer_index, cfg, dataset)
        except Exception as exc:  # noqa: BLE001 - partial reports preserved
            raise BinarizeError(run, layer_index, exc) from exc
    return run


def binarize_model(source_manifest: ModelManifest, dataset: Dataset,
                   cfg: PipelineConfig | None = None,
                   out_dir: str | Path | None = None) -> BinarizeRun:
    """Manifest-level entry point; optionally persists the converted model."""
    source_net = Network.from_manifest(source_manifest)
    run = binarize_network(source_net, dataset, cfg)
    run.source_manifest = source_manifest
    if out_dir is not None:
        run.target_manifest = run.target_net.to_manifest(out_dir)
    return run


def write_run_report(run: BinarizeRun, path: str | Path) -> None:
    doc = {
        "model": run.target_net.name,
        "layers": [asdict(r) for r in run.layer_reports],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
