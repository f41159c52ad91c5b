"""Scikit-learn style front end for the column solver.

``ScaledSignApproximator`` fits, for each output column of a linear map, a
-1/+1 code vector plus one real scale so that ``X @ (codes * scales)``
approximates the given targets. It follows the estimator protocol
(``get_params`` / ``set_params`` / ``fit`` / ``transform``) so it can sit in
sklearn pipelines and grids.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .binarizer import HashProblem, SolverConfig, solve_layer


class ScaledSignApproximator(BaseEstimator, TransformerMixin):
    """Approximate a linear map with per-column scaled sign codes.

    Parameters mirror the solver configuration. ``fit`` expects ``X`` of
    shape (n_samples, s_features) and targets ``Y`` of shape
    (n_samples, n_outputs); the optional ``init_weights`` (s_features,
    n_outputs) seed the codes, otherwise a least-squares fit of ``Y`` on
    ``X`` is used.
    """

    def __init__(self, max_iter: int = 20, rel_tol: float = 1e-6, threads: int = 1):
        self.max_iter = max_iter
        self.rel_tol = rel_tol
        self.threads = threads

    def fit(self, X, Y, init_weights=None):
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or Y.shape[0] != X.shape[0]:
            raise ValueError(f"incompatible shapes X{X.shape} Y{Y.shape}")
        if init_weights is None:
            init_weights, *_ = np.linalg.lstsq(X, Y, rcond=None)
        init_weights = np.asarray(init_weights, dtype=np.float64)
        problem = HashProblem(x_tilde=X.T, s_target=Y, w=init_weights)
        cfg = SolverConfig(max_iter=self.max_iter, rel_tol=self.rel_tol)
        solution = solve_layer(problem, cfg, threads=self.threads)
        self.n_features_in_ = X.shape[1]
        self.codes_ = solution.codes
        self.scales_ = solution.scales
        self.objective_traces_ = solution.traces
        self.flagged_columns_ = solution.flagged_columns
        return self

    def transform(self, X):
        if not hasattr(self, "codes_"):
            raise NotFittedError("ScaledSignApproximator is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has shape {X.shape}, expected (*, {self.n_features_in_})"
            )
        return X @ (self.codes_.astype(np.float64) * self.scales_)
