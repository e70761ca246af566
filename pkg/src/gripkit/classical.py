"""Non-learned baselines: regularized gradient descent and scale-space iteration.

Both start from zero (edge-valued problems start from all-ones, see
``ClassicalConfig.edge_init``). Classification problems are solved for a
score matrix whose row-softmax is pushed through the forward operator, so
the data fit compares distributions with the one-hot observations.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .forward import Problem
from .graph import apply_laplacian_pinv, component_mean_projector, line_graph_laplacian


class DivergenceError(ArithmeticError):
    def __init__(self, iteration: int, residual: float):
        super().__init__(f"data residual blew up at iteration {iteration} (|r|={residual:.3e})")
        self.iteration = iteration
        self.residual = residual


@dataclass
class ClassicalConfig:
    regularizer: str = "laplacian"
    alpha: float = 0.1
    step_size: float = 0.1
    max_iter: int = 3000
    stop_nmse: float = 0.0025
    pinv_tol: float = 1e-8
    pinv_max_iter: int = 500
    # Scale-space only: also step along per-component constants (null space of L).
    null_space_step: bool = True
    # Weight on that projector. Large values leave the mean nearly unpenalised, as R = L does.
    null_space_weight: float = 1.0
    # Edge states start here; zero sits on the flat part of the weight floor.
    edge_init: float = 1.0
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.regularizer not in ("laplacian", "tikhonov"):
            raise ValueError("regularizer must be 'laplacian' or 'tikhonov'")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")
        if self.stop_nmse <= 0:
            raise ValueError("stop_nmse must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.null_space_weight < 0:
            raise ValueError("null_space_weight must be non-negative")


@dataclass
class Trace:
    data_fit: np.ndarray
    recovery: Optional[np.ndarray] = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "data_fit_nmse", "recovery_nmse"])
            for i, df in enumerate(self.data_fit):
                rec = "" if self.recovery is None else repr(float(self.recovery[i]))
                w.writerow([i, repr(float(df)), rec])


def regularizer_matrix(problem: Problem, kind: str):
    size = problem.graph.m if problem.target == "edge" else problem.graph.n
    if kind == "tikhonov":
        return sp.identity(size, format="csr")
    if problem.target == "edge":
        return line_graph_laplacian(problem.graph)
    return problem.graph.laplacian


def softmax(x) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _nmse(a, b) -> float:
    denom = float(np.sum(b * b))
    return float(np.sum((a - b) ** 2)) / denom if denom > 0 else float(np.sum((a - b) ** 2))


def data_residual_and_gradient(problem: Problem, x: np.ndarray):
    """Residual F(x) - d (through softmax for classification) and J^T r."""
    d = problem.d_obs
    if problem.target == "edge":
        xt = ad.Tensor(x, requires_grad=True)
        pred = problem.forward(xt)
        r = pred.value - d
        pred.backward(r)
        return r, xt.grad
    if problem.task_kind == "classification":
        s = softmax(x)
        r = problem.forward(s) - d
        v = problem.adjoint(r)
        return r, s * (v - (v * s).sum(axis=1, keepdims=True))
    r = problem.forward(x) - d
    return r, problem.adjoint(r)


def recovery_nmse(problem: Problem, x: np.ndarray) -> Optional[float]:
    if problem.x_true is None:
        return None
    if problem.task_kind == "classification":
        return _nmse(softmax(x), problem.x_true)
    return _nmse(x, problem.x_true)


def initial_state(problem: Problem, cfg: ClassicalConfig) -> np.ndarray:
    rows, cols = problem.state_shape
    if problem.target == "edge":
        return np.full((rows, cols), cfg.edge_init)
    return np.zeros((rows, cols))


def solve_variational_classical(problem: Problem, cfg: ClassicalConfig, x0=None):
    """x <- x - mu (J^T (F(x) - d) + alpha R x) until the data fit is small.

    Returns the final state and a ``Trace`` holding the data-fit nMSE (and
    recovery nMSE when the truth is known) of every visited iterate.
    """
    R = regularizer_matrix(problem, cfg.regularizer)
    x = initial_state(problem, cfg) if x0 is None else np.array(x0, dtype=np.float64)
    dnorm2 = float(np.sum(problem.d_obs ** 2))
    fits, recs = [], []
    r0 = None
    for it in range(cfg.max_iter + 1):
        r, grad = data_residual_and_gradient(problem, x)
        rn = float(np.linalg.norm(r))
        if r0 is None:
            r0 = rn
        elif rn > cfg.divergence_factor * max(r0, 1e-300) or not np.isfinite(rn):
            raise DivergenceError(it, rn)
        fit = rn * rn / dnorm2 if dnorm2 > 0 else rn * rn
        fits.append(fit)
        recs.append(recovery_nmse(problem, x))
        if fit < cfg.stop_nmse or it == cfg.max_iter:
            break
        if cfg.alpha:
            grad = grad + cfg.alpha * (R @ x)
        x = x - cfg.step_size * grad
    rec = None if recs[0] is None else np.array(recs)
    return x, Trace(np.array(fits), rec)


def solve_scale_space(problem: Problem, cfg: ClassicalConfig) -> np.ndarray:
    """x <- x - mu H^-1 J^T (F(x) - d) with H^-1 = L^+ (+ weighted null-space projector).

    Returns every iterate, starting with x0 = 0, stacked along axis 0.
    """
    if not problem.spec.is_linear or problem.target != "node":
        raise TypeError("scale-space iteration needs a linear node-valued problem")
    g = problem.graph
    x = np.zeros(problem.state_shape)
    trace = [x]
    for _ in range(cfg.max_iter):
        grad = problem.adjoint(problem.forward(x) - problem.d_obs)
        step = apply_laplacian_pinv(g, grad, tol=cfg.pinv_tol, max_iter=cfg.pinv_max_iter)
        if cfg.null_space_step:
            step = step + cfg.null_space_weight * component_mean_projector(g, grad)
        x = x - cfg.step_size * step
        trace.append(x)
    return np.stack(trace)
