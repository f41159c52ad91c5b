"""Per-layer binary code solver.

One layer is the problem: given featuremaps ``X`` (s x m, one column per
spatial position/sample) and a target similarity matrix ``S`` (m x n,
``S = X_ref^T W``), find codes ``B in {-1,+1}^{s x n}`` and one scale per
output column so that ``alpha_i * X^T B_i`` reconstructs ``S_i``. Columns
are independent; each is solved by alternating an exact 1-D least-squares
scale update with a cyclic pass of conditionally-optimal bit updates.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .validation import (
    as_float_matrix,
    as_vector,
    check_codes,
    check_consistent,
    check_finite_scalar,
)

TIE_BREAK_PLUS_ONE = "plus_one"
ZERO_DENOM_MEAN_L1 = "mean_l1_fallback"


@dataclass
class SolverConfig:
    max_iter: int = 20
    rel_tol: float = 1e-6
    tie_break: str = TIE_BREAK_PLUS_ONE
    zero_denominator_policy: str = ZERO_DENOM_MEAN_L1
    seed: int = 42

    def validate(self) -> None:
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.rel_tol < 0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if self.tie_break != TIE_BREAK_PLUS_ONE:
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.zero_denominator_policy != ZERO_DENOM_MEAN_L1:
            raise ValueError(
                f"unknown zero_denominator_policy {self.zero_denominator_policy!r}"
            )


@dataclass
class HashProblem:
    """One layer's solve inputs: reconstruction featuremaps, targets, real weights."""

    x_tilde: np.ndarray  # (s, m)
    s_target: np.ndarray  # (m, n)
    w: np.ndarray  # (s, n)

    def validate(self) -> None:
        # shapes only; value problems surface per column during solving
        x = np.asarray(self.x_tilde)
        s = np.asarray(self.s_target)
        w = np.asarray(self.w)
        if x.ndim != 2 or s.ndim != 2 or w.ndim != 2:
            raise ValueError("x_tilde, s_target and w must all be 2-d")
        if s.shape[0] != x.shape[1]:
            raise ValueError(
                f"s_target has {s.shape[0]} rows, expected {x.shape[1]} (columns of x_tilde)"
            )
        if w.shape != (x.shape[0], s.shape[1]):
            raise ValueError(
                f"w has shape {w.shape}, expected ({x.shape[0]}, {s.shape[1]})"
            )


@dataclass
class ColumnSolution:
    codes: np.ndarray  # (s,) int8
    scale: float
    trace: list[float]
    flagged: bool = False


@dataclass
class BinarySolution:
    codes: np.ndarray  # (s, n) int8
    scales: np.ndarray  # (n,) float64
    traces: list[list[float]] = field(default_factory=list)
    flagged_columns: list[int] = field(default_factory=list)

    @property
    def n_columns(self) -> int:
        return self.codes.shape[1]


class LayerSolveError(Exception):
    """Aggregates per-column failures with their column indices."""

    def __init__(self, failures: list[tuple[int, Exception]]):
        self.failures = failures
        detail = "; ".join(f"column {i}: {exc}" for i, exc in failures)
        super().__init__(f"{len(failures)} column(s) failed: {detail}")


def objective(x_tilde, s_col, b_col, alpha: float) -> float:
    """Squared reconstruction error ``||s - alpha * X^T b||^2``."""
    x = as_float_matrix("x_tilde", x_tilde)
    s = as_vector("s_col", s_col)
    b = check_codes("b_col", b_col)
    check_consistent(x, s, b)
    alpha = check_finite_scalar("alpha", alpha)
    return _objective(x, s, b, alpha)


def _objective(x: np.ndarray, s: np.ndarray, b: np.ndarray, alpha: float) -> float:
    r = s - alpha * (x.T @ b)
    return float(r @ r)


def init_codes(w_col) -> np.ndarray:
    """Elementwise sign of the real weights; sign(0) = +1."""
    w = as_vector("w_col", w_col)
    return np.where(w >= 0.0, 1, -1).astype(np.int8)


def init_scale(w_col) -> float:
    """Mean L1 magnitude of the real weight column."""
    w = as_vector("w_col", w_col)
    return float(np.abs(w).mean())


def update_scale(x_tilde, s_col, b_col, fallback: float = 0.0) -> float:
    """Exact minimizer of the column objective in the scale, codes fixed.

    When ``X^T b`` is identically zero the objective does not depend on the
    scale; ``fallback`` (callers pass the mean-L1 init of the real weights)
    is returned instead.
    """
    x = as_float_matrix("x_tilde", x_tilde)
    s = as_vector("s_col", s_col)
    b = check_codes("b_col", b_col)
    check_consistent(x, s, b)
    y = x.T @ b
    den = float(y @ y)
    if den == 0.0:
        return check_finite_scalar("fallback", fallback)
    return check_finite_scalar("alpha", float(s @ y) / den)


def dcc_sweep(x_tilde, s_col, b_col, alpha: float) -> np.ndarray:
    """One ascending pass of conditionally-optimal single-bit updates.

    Each bit is set to the sign of its partial objective gradient holding the
    other bits fixed; an exactly-zero argument resolves to +1. The objective
    never increases across the pass.
    """
    x = as_float_matrix("x_tilde", x_tilde)
    s = as_vector("s_col", s_col)
    b = check_codes("b_col", b_col)
    check_consistent(x, s, b)
    alpha = check_finite_scalar("alpha", alpha)
    gram = x @ x.T
    q0 = x @ s
    out, _ = _sweep(gram, q0, b.copy(), alpha)
    return out.astype(np.int8)


def _sweep(gram: np.ndarray, q0: np.ndarray, b: np.ndarray, alpha: float):
    # Gram precompute makes each bit update O(s): the coupling term
    # B'^T Z' v equals (G b)_j - G_jj b_j with G = alpha^2 * X X^T.
    q = alpha * q0
    g = (alpha * alpha) * gram
    gb = g @ b
    diag = np.diag(g)
    flips = 0
    for j in range(b.shape[0]):
        arg = q[j] - (gb[j] - diag[j] * b[j])
        new = 1.0 if arg >= 0.0 else -1.0
        if new != b[j]:
            gb += (new - b[j]) * g[:, j]
            b[j] = new
            flips += 1
    return b, flips


def solve_column(
    x_tilde,
    s_col,
    w_col,
    cfg: SolverConfig | None = None,
    fixed_scale: float | None = None,
    _gram: np.ndarray | None = None,
) -> ColumnSolution:
    """Alternating optimization of one output column.

    Initializes codes to sign(w) and the scale to mean |w|, then repeats
    scale update -> bit sweep until the relative objective decrease drops
    below ``cfg.rel_tol`` with a flip-free sweep, or ``cfg.max_iter`` passes.
    The trace holds the objective after each outer iteration. With
    ``fixed_scale`` set, the scale is pinned (used by the no-scale ablation).
    """
    cfg = cfg or SolverConfig()
    cfg.validate()
    x = as_float_matrix("x_tilde", x_tilde)
    s = as_vector("s_col", s_col)
    w = as_vector("w_col", w_col)
    if w.shape[0] != x.shape[0]:
        raise ValueError(f"w_col has shape {w.shape}, expected ({x.shape[0]},)")

    b = init_codes(w).astype(np.float64)
    check_consistent(x, s, b)
    alpha_init = init_scale(w)
    alpha = alpha_init if fixed_scale is None else float(fixed_scale)
    gram = _gram if _gram is not None else x @ x.T
    q0 = x @ s

    flagged = False
    trace: list[float] = []
    current = _objective(x, s, b, alpha)
    for _ in range(cfg.max_iter):
        if fixed_scale is None:
            y = x.T @ b
            den = float(y @ y)
            if den == 0.0:
                alpha_new = alpha_init
                flagged = True
            else:
                alpha_new = float(s @ y) / den
        else:
            alpha_new = alpha
        b_new, flips = _sweep(gram, q0, b.copy(), alpha_new)
        obj = _objective(x, s, b_new, alpha_new)
        if obj > current:
            # Both block updates are exact minimizers, so a computed increase
            # can only be rounding noise on a plateau: keep the old iterate.
            break
        b, alpha = b_new, alpha_new
        trace.append(obj)
        stalled = current == 0.0 or (current - obj) < cfg.rel_tol * current
        current = obj
        if flips == 0 and stalled:
            break
    return ColumnSolution(b.astype(np.int8), alpha, trace, flagged)


def solve_layer(
    problem: HashProblem,
    cfg: SolverConfig | None = None,
    fixed_scale: float | None = None,
    threads: int = 1,
) -> BinarySolution:
    """Solve every output column of a layer independently."""
    cfg = cfg or SolverConfig()
    problem.validate()
    x = np.asarray(problem.x_tilde, dtype=np.float64)
    s_target = np.asarray(problem.s_target, dtype=np.float64)
    w = np.asarray(problem.w, dtype=np.float64)
    n = s_target.shape[1]
    gram = x @ x.T

    def run(i: int) -> ColumnSolution:
        # per-column contiguous slices keep results independent of
        # column count and execution order down to the last bit
        return solve_column(
            x, np.ascontiguousarray(s_target[:, i]), np.ascontiguousarray(w[:, i]),
            cfg, fixed_scale=fixed_scale, _gram=gram,
        )

    results: list[ColumnSolution | None] = [None] * n
    failures: list[tuple[int, Exception]] = []
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {i: pool.submit(run, i) for i in range(n)}
        for i, fut in futures.items():
            try:
                results[i] = fut.result()
            except Exception as exc:  # noqa: BLE001 - re-aggregated below
                failures.append((i, exc))
    else:
        for i in range(n):
            try:
                results[i] = run(i)
            except Exception as exc:  # noqa: BLE001
                failures.append((i, exc))
    if failures:
        raise LayerSolveError(sorted(failures, key=lambda f: f[0]))

    codes = np.stack([r.codes for r in results], axis=1)
    scales = np.array([r.scale for r in results], dtype=np.float64)
    traces = [r.trace for r in results]
    flagged = [i for i, r in enumerate(results) if r.flagged]
    return BinarySolution(codes, scales, traces, flagged)


def layer_objective(problem: HashProblem, codes: np.ndarray, scales: np.ndarray) -> float:
    """Total objective of a layer solution, summed over columns."""
    x = np.asarray(problem.x_tilde, dtype=np.float64)
    s = np.asarray(problem.s_target, dtype=np.float64)
    recon = (x.T @ codes.astype(np.float64)) * np.asarray(scales, dtype=np.float64)
    return float(((s - recon) ** 2).sum())


def initialization_objective(problem: HashProblem) -> float:
    """Objective at the sign/mean-L1 starting point, before any iteration."""
    w = np.asarray(problem.w, dtype=np.float64)
    codes = np.where(w >= 0.0, 1.0, -1.0)
    scales = np.abs(w).mean(axis=0)
    return layer_objective(problem, codes, scales)
