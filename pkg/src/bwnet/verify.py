"""Independent oracles and desk-scale reproductions for the solver.

Holds the exhaustive global-optimum search, the naive sign baselines, a
derivative-free 1-D minimizer, per-layer convergence curves, and the
progressive scale ablation.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from .binarizer import (
    HashProblem,
    SolverConfig,
    initialization_objective,
    objective,
    solve_column,
    solve_layer,
)
from .data import Dataset
from .net import MIXED, Network, evaluate
from .pipeline import PipelineConfig, binarize_network

MAX_ENUM_DIM = 20
_ENUM_CHUNK = 1 << 14


class EnumerationLimitError(Exception):
    pass


@dataclass
class OracleReport:
    s_dim: int
    m_cols: int
    seed: int
    oracle_objective: float
    solver_objective: float
    gap: float
    elapsed_s: float


def exhaustive_solve(x_tilde, s_col) -> tuple[np.ndarray, float, float]:
    """Global optimum of one column by enumerating all 2^s codes.

    The scale for each candidate code is its exact 1-D minimizer. Every
    optimum comes in a (codes, scale) / (-codes, -scale) pair, so ties
    resolve to a nonnegative scale first, then to the lexicographically
    smallest code (-1 before +1). Only feasible for s <= 20.
    """
    x = np.asarray(x_tilde, dtype=np.float64)
    s = np.asarray(s_col, dtype=np.float64)
    s_dim = x.shape[0]
    if s_dim > MAX_ENUM_DIM:
        raise EnumerationLimitError(f"s={s_dim} exceeds enumeration cap {MAX_ENUM_DIM}")
    sts = float(s @ s)
    bits = np.arange(s_dim - 1, -1, -1)
    best: tuple[float, bool, int, float] | None = None
    for start in range(0, 1 << s_dim, _ENUM_CHUNK):
        stop = min(start + _ENUM_CHUNK, 1 << s_dim)
        idx = np.arange(start, stop, dtype=np.int64)
        codes = np.where((idx[:, None] >> bits) & 1, 1.0, -1.0)
        y = codes @ x  # (chunk, m)
        num = y @ s
        den = np.einsum("ij,ij->i", y, y)
        alpha = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        loss = sts - 2.0 * alpha * num + alpha * alpha * den
        k = int(np.lexsort((idx, alpha < 0.0, loss))[0])
        cand = (float(loss[k]), bool(alpha[k] < 0.0), int(idx[k]), float(alpha[k]))
        if best is None or cand[:3] < best[:3]:
            best = cand
    loss, _, code_id, alpha = best
    codes = np.where((np.int64(code_id) >> bits) & 1, 1, -1).astype(np.int8)
    return codes, alpha, loss


@dataclass
class NaiveBaselines:
    codes: np.ndarray  # (s, n) int8, elementwise sign of the weights
    unit_scales: np.ndarray  # all-ones variant
    mean_l1_scales: np.ndarray  # per-column mean |w| variant


def naive_sign_binarize(w) -> NaiveBaselines:
    """Both sign baselines: plain sign codes, and sign codes with mean-L1 scales."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    codes = np.where(w >= 0.0, 1, -1).astype(np.int8)
    return NaiveBaselines(
        codes=codes,
        unit_scales=np.ones(w.shape[1]),
        mean_l1_scales=np.abs(w).mean(axis=0),
    )


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def golden_minimize(fn, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Derivative-free golden-section minimum of a unimodal function on [lo, hi].

    A final three-point parabolic fit pushes past the sqrt(eps) resolution
    wall of pure comparison-based search near flat minima.
    """
    a, b = float(lo), float(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if abs(b - a) < tol * (1.0 + abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    mid = (a + b) / 2.0
    h = 1e-4 * (1.0 + abs(mid))
    f0, f1, f2 = fn(mid - h), fn(mid), fn(mid + h)
    curvature = f0 - 2.0 * f1 + f2
    if curvature > 0.0:
        mid += 0.5 * h * (f0 - f2) / curvature
    return mid


def convergence_curve(problem: HashProblem, cfg: SolverConfig | None = None,
                      fixed_scale: float | None = None) -> list[tuple[int, float]]:
    """Total objective after each outer iteration, summed over all columns.

    Columns that stop early hold their final value, so the series is
    non-increasing and has one entry per iteration actually run.
    """
    solution = solve_layer(problem, cfg, fixed_scale=fixed_scale)
    w = np.asarray(problem.w, dtype=np.float64)
    col_init = [
        objective(problem.x_tilde, np.asarray(problem.s_target)[:, i],
                  np.where(w[:, i] >= 0.0, 1, -1),
                  np.abs(w[:, i]).mean() if fixed_scale is None else fixed_scale)
        for i in range(w.shape[1])
    ]
    length = max((len(t) for t in solution.traces), default=0)
    series: list[tuple[int, float]] = []
    for k in range(length):
        total = 0.0
        for i, trace in enumerate(solution.traces):
            total += trace[min(k, len(trace) - 1)] if trace else col_init[i]
        series.append((k + 1, total))
    return series


def initial_total(problem: HashProblem) -> float:
    return initialization_objective(problem)


def random_instance(s_dim: int, m_cols: int, seed: int,
                    noise: float = 0.1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A seeded (x, s, w) column instance with a signal-plus-noise target."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(s_dim, m_cols))
    w = rng.normal(size=s_dim)
    s = x.T @ w + noise * rng.normal(size=m_cols)
    return x, s, w


def oracle_trials(n_trials: int, s_max: int, seed: int,
                  cfg: SolverConfig | None = None) -> list[OracleReport]:
    """Solver-vs-enumeration gaps on seeded random instances with s <= s_max."""
    if s_max > MAX_ENUM_DIM:
        raise EnumerationLimitError(f"s_max={s_max} exceeds enumeration cap {MAX_ENUM_DIM}")
    cfg = cfg or SolverConfig()
    rng = np.random.default_rng(seed)
    reports = []
    for t in range(n_trials):
        s_dim = int(rng.integers(4, s_max + 1))
        m_cols = int(rng.integers(8, 65))
        inst_seed = int(rng.integers(0, 2**31))
        x, s, w = random_instance(s_dim, m_cols, inst_seed)
        start = time.perf_counter()
        _, _, oracle_obj = exhaustive_solve(x, s)
        col = solve_column(x, s, w, cfg)
        elapsed = time.perf_counter() - start
        solver_obj = col.trace[-1] if col.trace else np.inf
        reports.append(OracleReport(
            s_dim=s_dim, m_cols=m_cols, seed=inst_seed,
            oracle_objective=oracle_obj, solver_objective=solver_obj,
            gap=solver_obj - oracle_obj, elapsed_s=elapsed,
        ))
    return reports


@dataclass
class AblationRow:
    depth: int
    layer_name: str
    scaled_top1: float
    noscale_top1: float


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}


def _prefix_depth_net(full: Network, conv_indices: list[int], depth: int) -> Network:
    """Cut a fully converted network back to its first ``depth`` binary layers."""
    net = full.clone()
    for i in conv_indices[depth:]:
        layer = net.layers[i]
        layer.codes = None
        layer.scales = None
        layer.spec.binary_ref = None
        layer.spec.scale_ref = None
        layer.spec.binarized = False
    return net


def ablate_scale(network: Network, train_dataset: Dataset, eval_dataset: Dataset,
                 cfg: PipelineConfig | None = None) -> AblationResult:
    """Progressively binarize the conv stack with and without solved scales.

    Both arms binarize conv layers in order (the classifier stays float) and
    are evaluated after each prefix depth; depth 0 is the untouched model.
    The no-scale arm pins every scale to 1 during solving.
    """
    cfg = cfg or PipelineConfig()
    conv_indices = [i for i, l in network.weight_layers() if l.spec.kind == "Conv"]
    base_cfg = replace(cfg, layers=conv_indices, fixed_scale=None)
    noscale_cfg = replace(cfg, layers=conv_indices, fixed_scale=1.0)

    scaled_run = binarize_network(network, train_dataset, base_cfg)
    noscale_run = binarize_network(network, train_dataset, noscale_cfg)

    result = AblationResult()
    for depth in range(len(conv_indices) + 1):
        name = "none" if depth == 0 else network.layers[conv_indices[depth - 1]].spec.name
        scaled_net = _prefix_depth_net(scaled_run.target_net, conv_indices, depth)
        noscale_net = _prefix_depth_net(noscale_run.target_net, conv_indices, depth)
        result.rows.append(AblationRow(
            depth=depth,
            layer_name=name,
            scaled_top1=evaluate(scaled_net, eval_dataset, mode=MIXED)["top1"],
            noscale_top1=evaluate(noscale_net, eval_dataset, mode=MIXED)["top1"],
        ))
    return result


def write_oracle_report(reports: list[OracleReport], path: str | Path) -> None:
    matched = sum(1 for r in reports if r.gap <= 1e-9 * (1.0 + abs(r.oracle_objective)))
    doc = {
        "trials": len(reports),
        "global_optimum_matched": matched,
        "max_gap": max((r.gap for r in reports), default=0.0),
        "reports": [asdict(r) for r in reports],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def write_curve_report(series_by_layer: dict[str, list[tuple[int, float]]],
                       initials: dict[str, float], path: str | Path) -> None:
    doc = {
        name: {"initial_objective": initials[name],
               "series": [[int(i), float(v)] for i, v in series]}
        for name, series in series_by_layer.items()
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
